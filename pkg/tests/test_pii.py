import io
import json

import numpy as np
import pytest

from src import DATA_FOLDER
from src.errors import PiiError
from src.pii import (DEFAULT_PATTERNS, Gazetteer, PatternSet, PiiCategory, PiiMention, PiiSet, Provenance,
                     build_ground_truth, canonicalize, extract_pii, ground_truth_from_annotations,
                     import_external_annotations, load_gazetteer, load_patterns, set_difference)

P, O, G, F = PiiCategory.PERSON, PiiCategory.ORGANIZATION, PiiCategory.GPE, PiiCategory.FACILITY
M, D, C = PiiCategory.MONEY, PiiCategory.DATE, PiiCategory.CARDINAL

FIXTURE_GAZETTEER = {
    'PERSON': ['Tracy Smith', 'Jeffrey K. Skilling', 'John'],
    'ORG': ['KPMG', 'Enron', 'Enron North America', 'C-SPAN'],
    'GPE': ['Santa Clara', 'Palo Alto', 'Houston'],
    'FAC': ['Enron Field'],
}

# Each sentence is a list of (text, category) parts; category None is plain text.
FIXTURE_SENTENCES = [
    [("Please call ", None), ("Tracy Smith", P), (" before noon.", None)],
    [("The memo from ", None), ("Jeffrey K. Skilling", P), (" went out late.", None)],
    [("John", P), (" and Johnson are different people.", None)],
    [("Auditors at ", None), ("KPMG", O), (" asked for the files.", None)],
    [("He moved to ", None), ("Enron North America", O), (" last spring.", None)],
    [("The Enronite culture is not an entity, but ", None), ("Enron", O), (" is.", None)],
    [("We watched it on ", None), ("C-SPAN", O), (" together.", None)],
    [("The office in ", None), ("Santa Clara", G), (" is closing.", None)],
    [("She flew from ", None), ("Palo Alto", G), (" to ", None), ("Houston", G), (" overnight.", None)],
    [("A Houstonian wrote back from ", None), ("Houston", G), (".", None)],
    [("The game at ", None), ("Enron Field", F), (" sold out.", None)],
    [("The fee was ", None), ("$1,200", M), (" in total.", None)],
    [("They lost ", None), ("19 million", M), (" on the deal.", None)],
    [("The write-down reached ", None), ("$2.5 billion", M), (" by then.", None)],
    [("The call is on ", None), ("June 6, 2001", D), (" in the morning.", None)],
    [("It happened on ", None), ("Wednesday, June 6, 2001", D), (".", None)],
    [("See you ", None), ("Thursday, Sept. 14", D), (" at lunch.", None)],
    [("The filing date is ", None), ("10/23/2001", D), (" for now.", None)],
    [("The system logged ", None), ("2001-10-23", D), (" as the cutoff.", None)],
    [("We shipped ", None), ("4,500", C), (" units.", None)],
    [("Only ", None), ("37", C), (" people replied.", None)],
    [("Tracy Smith", P), (" met ", None), ("KPMG", O), (" in ", None), ("Houston", G), (".", None)],
    [("The ", None), ("Santa \n Clara", G), (" team replied.", None)],
    [("Send ", None), ("$350", M), (" to ", None), ("Enron", O), (" by ", None), ("October 1", D), (".", None)],
    [("The ", None), ("Enron Field", F), (" lights were off on ", None), ("May 3", D), (".", None)],
    [("kpmg", O), (" in lower case still counts.", None)],
    [("A total of ", None), ("12,000", C), (" emails and ", None), ("8", C), (" folders.", None)],
    [("Nothing to report here at all.", None)],
    [("Meet ", None), ("john", P), (" at ", None), ("Palo Alto", G), (" on ", None), ("Friday, March 2", D),
     (".", None)],
    [("Budget: ", None), ("$75 thousand", M), (" for ", None), ("3", C), (" teams.", None)],
]


def _assemble(sentences, source_id='fixture'):
    """Concatenate sentence parts, recording the span of every placed mention."""
    text, expected = '', []
    for index, parts in enumerate(sentences):
        if index:
            text += ' '
        for part, category in parts:
            if category is not None:
                expected.append(PiiMention(part, category, len(text), len(text) + len(part), source_id))
            text += part
    return text, expected


@pytest.fixture(scope='module')
def fixture_gazetteer():
    return Gazetteer.from_mapping(FIXTURE_GAZETTEER)


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

def test_fixture_covers_every_category():
    placed = {category for parts in FIXTURE_SENTENCES for _, category in parts if category is not None}
    assert placed == set(PiiCategory)
    assert len(FIXTURE_SENTENCES) == 30


@pytest.mark.parametrize('index', range(len(FIXTURE_SENTENCES)))
def test_extract_each_fixture_sentence(index, fixture_gazetteer, patterns):
    text, expected = _assemble([FIXTURE_SENTENCES[index]])
    found = extract_pii(text, fixture_gazetteer, patterns, source_id='fixture')
    assert found == expected
    for mention in found:
        assert text[mention.start:mention.end] == mention.surface


def test_extract_full_fixture_text(fixture_gazetteer, patterns):
    text, expected = _assemble(FIXTURE_SENTENCES)
    found = extract_pii(text, fixture_gazetteer, patterns, source_id='fixture')
    assert found == expected
    assert all(mention.matches(text) for mention in found)


def test_longest_match_and_whole_tokens(fixture_gazetteer, patterns):
    found = extract_pii("Enron North America and Enronite", fixture_gazetteer, patterns)
    assert [(m.surface, m.category) for m in found] == [("Enron North America", O)]

    found = extract_pii("Tickets for Enron Field", fixture_gazetteer, patterns)
    assert [(m.surface, m.category) for m in found] == [("Enron Field", F)]


def test_identical_spans_resolve_by_category_order(patterns):
    gazetteer = Gazetteer.from_mapping({'ORG': ['Morgan'], 'PERSON': ['Morgan']})
    (mention,) = extract_pii("Morgan called.", gazetteer, patterns)
    assert mention.category is P


def test_extract_empty_text(fixture_gazetteer, patterns):
    assert extract_pii('', fixture_gazetteer, patterns) == []


def test_default_patterns_build_with_their_categories():
    patterns = PatternSet.default()
    assert patterns.names == tuple(DEFAULT_PATTERNS)
    assert {category for _, category, _ in patterns.patterns} == {M, D, C}
    assert PiiCategory.from_label(M) is M


def test_pattern_files(tmp_path):
    path = tmp_path / 'patterns.json'
    path.write_text(json.dumps({'ticker': {'category': 'ORG', 'regex': r'\bENE\b'}}), encoding='utf-8')
    loaded = load_patterns(str(path), ['ticker', 'cardinal'])
    found = extract_pii("ENE fell 3 points", Gazetteer.empty(), loaded)
    assert [(m.surface, m.category) for m in found] == [("ENE", O), ("3", C)]

    for payload in (b'{not json', b'\xff\xfe{}', b'[1, 2]'):
        path.write_bytes(payload)
        with pytest.raises(PiiError) as info:
            load_patterns(str(path))
        assert info.value.kind == 'InvalidPattern'


def test_pattern_selection():
    only_cardinal = PatternSet.default(['cardinal'])
    assert only_cardinal.names == ('cardinal',)
    found = extract_pii("Pay $1,200 on June 6", Gazetteer.empty(), only_cardinal)
    assert [(m.surface, m.category) for m in found] == [("1,200", C), ("6", C)]
    with pytest.raises(PiiError) as info:
        PatternSet.default(['no_such_pattern'])
    assert info.value.kind == 'UnknownPattern'


# ---------------------------------------------------------------------------
# Canonicalization and categories
# ---------------------------------------------------------------------------

def test_canonicalize():
    assert canonicalize('  "Tracy   Smith" ', P) == 'tracy smith'
    assert canonicalize("'“KPMG”'", O) == 'kpmg'
    assert canonicalize('June  6, 2001', D) == 'June 6, 2001'
    assert canonicalize('$1,200', M) == '$1,200'
    with pytest.raises(PiiError) as info:
        canonicalize(' "" ', P)
    assert info.value.kind == 'EmptyAfterTrim'


def test_canonicalize_is_idempotent_on_random_strings():
    alphabet = list(' \t"\'“”«»abcXYZ$1,.')
    rng = np.random.default_rng(11)
    checked = 0
    for case in range(1000):
        surface = ''.join(rng.choice(alphabet, size=int(rng.integers(1, 13))).tolist())
        category = list(PiiCategory)[case % len(PiiCategory)]
        try:
            once = canonicalize(surface, category)
        except PiiError:
            continue
        assert canonicalize(once, category) == once
        checked += 1
    assert checked > 500


def test_category_labels():
    assert PiiCategory.from_label('Organization') is O
    assert PiiCategory.from_label('facility') is F
    assert PiiCategory.from_label('GPE') is G
    with pytest.raises(PiiError) as info:
        PiiCategory.from_label('EMAIL')
    assert info.value.kind == 'UnknownCategory'


def test_gazetteer_validation_and_loading():
    with pytest.raises(PiiError) as info:
        Gazetteer(entries={P: ('Tracy Smith',)})
    assert info.value.kind == 'InvalidGazetteer'

    gazetteer = load_gazetteer(f"{DATA_FOLDER}/gazetteer.json")
    assert 'kpmg' in gazetteer.entries[O]
    assert 'jeffrey k. skilling' in gazetteer.entries[P]

    with pytest.raises(PiiError) as info:
        load_gazetteer(io.BytesIO(b'{not json'))
    assert info.value.kind == 'InvalidGazetteer'


# ---------------------------------------------------------------------------
# External annotations
# ---------------------------------------------------------------------------

def _annotation(**overrides):
    row = {'source_id': 'e1', 'start': 6, 'end': 10, 'surface': 'KPMG', 'category': 'ORG'}
    row.update(overrides)
    return json.dumps(row)


def test_import_annotations():
    data = '\n'.join([_annotation(), _annotation(start=0, end=5, surface='Tracy', category='person')])
    mentions = import_external_annotations(io.BytesIO(data.encode('utf-8')), texts={'e1': 'Tracy KPMG'})
    assert [(m.surface, m.category, m.span) for m in mentions] == [('KPMG', O, (6, 10)), ('Tracy', P, (0, 5))]
    truth = ground_truth_from_annotations(mentions)
    assert truth.provenance is Provenance.GROUND_TRUTH
    assert set(truth) == {(O, 'kpmg'), (P, 'tracy')}


def test_import_annotations_errors():
    with pytest.raises(PiiError) as info:
        import_external_annotations(io.BytesIO((_annotation() + '\n' + _annotation(category='EMAIL')).encode()))
    assert (info.value.kind, info.value.line) == ('UnknownCategory', 2)

    with pytest.raises(PiiError) as info:
        import_external_annotations(io.BytesIO(_annotation(end=12).encode()))
    assert info.value.kind == 'SpanMismatch'

    with pytest.raises(PiiError) as info:
        import_external_annotations(io.BytesIO(_annotation().encode()), texts={'e1': 'Tracy Smith!'})
    assert info.value.kind == 'SpanMismatch'

    with pytest.raises(PiiError) as info:
        import_external_annotations(io.BytesIO(b'{"source_id": "e1"}'))
    assert info.value.kind == 'MalformedAnnotation'

    with pytest.raises(PiiError) as info:
        import_external_annotations(io.BytesIO(b'\xff\xfe{"source_id": "e1"}'))
    assert info.value.kind == 'Encoding'


# ---------------------------------------------------------------------------
# Sets
# ---------------------------------------------------------------------------

def test_pii_set_requires_canonical_values():
    with pytest.raises(PiiError) as info:
        PiiSet(frozenset({(P, 'Tracy Smith')}))
    assert info.value.kind == 'NotCanonical'


def test_pii_set_persistence_and_views():
    pii = PiiSet(frozenset({(P, 'tracy smith'), (O, 'kpmg'), (P, 'john')}), Provenance.GROUND_TRUTH)
    assert PiiSet.from_dict(pii.to_dict()) == pii
    assert pii.by_category() == {P: ['john', 'tracy smith'], O: ['kpmg']}
    assert list(pii)[0] == (P, 'john')


def _random_set(rng, universe):
    size = int(rng.integers(0, len(universe) + 1))
    chosen = rng.choice(len(universe), size=size, replace=False)
    return PiiSet(frozenset(universe[i] for i in chosen.tolist()))


def test_set_difference_laws_against_pairwise_oracle():
    categories = list(PiiCategory)
    universe = [(category, f"v{k}") for category in categories for k in range(4)]
    rng = np.random.default_rng(2023)
    for _ in range(1000):
        a, b = _random_set(rng, universe), _random_set(rng, universe)
        diff = set_difference(a, b)
        oracle = [x for x in a.entries if all(x != y for y in b.entries)]
        assert sorted(diff.entries) == sorted(oracle)
        assert not diff.entries & b.entries
        assert diff.entries | a.intersection(b).entries == a.entries
        assert len(set_difference(a, a)) == 0
        assert set_difference(a, PiiSet()).entries == a.entries
        assert diff.provenance is Provenance.DERIVED


def test_ground_truth_of_synthetic_corpus_is_the_planted_set(synthetic, synthetic_gazetteer, patterns):
    truth = build_ground_truth(synthetic.records, synthetic_gazetteer, patterns)
    assert truth.entries == synthetic.planted.entries
    assert len(truth) == 120
    assert {category for category, _ in truth} == set(PiiCategory)
