"""
Deterministic synthetic email corpus with planted PII.

Every planted value sits in its own sentence; filler sentences carry no digits
and no gazetteer names, so the PII recoverable from a body is exactly what was
planted into it.
"""
import logging
from typing import Dict, List, NamedTuple

import numpy as np

from src.corpus import EmailRecord
from src.errors import CorpusError
from src.pii import PiiCategory, PiiSet, Provenance, canonicalize

logger = logging.getLogger(__name__)

FIRST_NAMES = ('Arden', 'Belinda', 'Corwin', 'Delphine', 'Emrys', 'Fenella', 'Galen', 'Hestia', 'Ivor',
               'Juniper', 'Kestrel', 'Linnea', 'Marek', 'Nerys', 'Osric', 'Perpetua', 'Quillon', 'Rowena',
               'Soren', 'Thessaly')
LAST_NAMES = ('Ashdown', 'Blackwood', 'Carraway', 'Dunleavy', 'Everhart', 'Fairweather', 'Greaves', 'Hollis',
              'Ironside', 'Jessop', 'Kilbride', 'Lockhart', 'Merriweather', 'Northcott', 'Oakes', 'Penhaligon',
              'Quartermaine', 'Ravenscroft', 'Stavely', 'Thornbury')
ORG_STEMS = ('Bellhaven', 'Cobalt Ridge', 'Driftmoor', 'Emberline', 'Foxglove', 'Granite Bay', 'Halcyon',
             'Ironbark', 'Juniperus', 'Kingfisher', 'Lodestar', 'Meridian Vale')
ORG_SUFFIXES = ('Energy Partners', 'Holdings', 'Capital Group', 'Trading Company', 'Pipeline Services')
GPE_PREFIXES = ('North', 'South', 'East', 'West', 'Port', 'Lake', 'Mount', 'New')
GPE_STEMS = ('Ellery', 'Corvale', 'Dunmore', 'Astonbury', 'Wrexley', 'Tallowmere', 'Brindle', 'Sallowick')
FAC_STEMS = ('Harrowgate', 'Pemberly', 'Winslow', 'Calloway', 'Ravensmoor', 'Stonebridge', 'Whitlock',
             'Amberley', 'Kingsmere', 'Oldcastle')
FAC_SUFFIXES = ('Field', 'Tower', 'Plaza', 'Arena', 'Conference Center')
MONTHS = ('January', 'February', 'March', 'April', 'May', 'June', 'July', 'August', 'September', 'October',
          'November', 'December')

PII_SENTENCES = {
    PiiCategory.PERSON: "I spoke with {} about the schedule this morning.",
    PiiCategory.ORGANIZATION: "The team at {} sent over their comments on the draft.",
    PiiCategory.GPE: "Our group will be traveling to {} next week for the review.",
    PiiCategory.FACILITY: "We booked the large room at {} for the session.",
    PiiCategory.MONEY: "The revised estimate comes to {} for the whole project.",
    PiiCategory.DATE: "The final version is due on {} at the latest.",
    PiiCategory.CARDINAL: "We counted {} responses in the latest survey.",
}

FILLER_SENTENCES = (
    "Let me know if you have any questions about the attached notes.",
    "I think we should go over the numbers together before the call.",
    "The meeting went well and everyone seemed to agree on the next steps.",
    "Please take a look when you get a chance and send me your thoughts.",
    "We still need to finalize the agenda for the offsite.",
    "I will circle back once I hear from the legal group.",
    "Thanks again for pulling this together on such short notice.",
    "The contract language still needs some work in the second section.",
    "Can you confirm whether the pricing assumptions are still valid?",
    "I have copied the rest of the team so they are aware.",
    "We may need to push the deadline if the approvals take longer.",
    "Nothing has changed on our side since we last talked.",
    "I would like to get this wrapped up before the end of the quarter.",
    "The counterparty asked for a few more days to review the terms.",
    "Let us plan to discuss this in more detail on our weekly call.",
    "I am not convinced the current structure works for everyone.",
    "Feel free to forward this to anyone who should be involved.",
    "The trading desk raised a couple of concerns about the exposure.",
)

SUBJECTS = ('Follow up on the draft', 'Quick question about the schedule', 'Notes from this morning',
            'Contract review', 'Updated estimate', 'Travel plans for the review', 'Room booking',
            'Comments on the proposal', 'Next steps', 'Survey responses', 'Agenda for the offsite',
            'Pricing assumptions', 'Approvals status', 'Open items', 'Quarter end wrap up')
FOLDERS = ('inbox', 'sent_items', 'projects', 'legal', 'travel')

FILLER_PER_EMAIL = 4


class SyntheticCorpus(NamedTuple):
    records: List[EmailRecord]
    gazetteer: Dict[str, List[str]]
    planted: PiiSet
    planted_by_record: Dict[str, PiiSet]


def _person_names():
    return [f"{first} {last}" for first in FIRST_NAMES for last in LAST_NAMES]


def _org_names():
    return [f"{stem} {suffix}" for stem in ORG_STEMS for suffix in ORG_SUFFIXES]


def _gpe_names():
    return [f"{prefix} {stem}" for prefix in GPE_PREFIXES for stem in GPE_STEMS]


def _facility_names():
    return [f"{stem} {suffix}" for stem in FAC_STEMS for suffix in FAC_SUFFIXES]


def _draw_distinct(rng, pool, count):
    indices = rng.choice(len(pool), size=count, replace=False)
    return [pool[index] for index in indices.tolist()]


def _money_values(rng, count):
    amounts = rng.choice(np.arange(1_000, 1_000_000), size=count, replace=False)
    return [f"${amount:,}" for amount in amounts.tolist()]


def _date_values(rng, count):
    # 12 months x 28 days x 4 years of distinct dates
    codes = rng.choice(12 * 28 * 4, size=count, replace=False)
    values = []
    for code in codes.tolist():
        month, rest = divmod(code, 28 * 4)
        day, year = divmod(rest, 4)
        values.append(f"{MONTHS[month]} {day + 1}, {1998 + year}")
    return values


def _cardinal_values(rng, count):
    return [str(value) for value in rng.choice(np.arange(100, 10_000), size=count, replace=False).tolist()]


_NAMED_POOLS = {
    PiiCategory.PERSON: _person_names,
    PiiCategory.ORGANIZATION: _org_names,
    PiiCategory.GPE: _gpe_names,
    PiiCategory.FACILITY: _facility_names,
}
_NUMERIC_DRAWS = {
    PiiCategory.MONEY: _money_values,
    PiiCategory.DATE: _date_values,
    PiiCategory.CARDINAL: _cardinal_values,
}


def generate_synthetic_corpus(n_emails=50, n_pii=120, seed=0):
    """
    Build n_emails records carrying n_pii distinct planted PIIs. Categories are
    assigned round-robin over the schema and PIIs round-robin over the emails.
    Returns records, a gazetteer mapping (category label -> names), the
    planted ground-truth set and the planted set of every record by id.
    """
    if n_emails < 1 or n_pii < 0:
        raise CorpusError('InvalidSynthetic', "need at least one email and a non-negative PII count",
                          n_emails=n_emails, n_pii=n_pii)
    rng = np.random.default_rng(seed)
    categories = list(PiiCategory)
    wanted = {category: len(range(rank, n_pii, len(categories))) for rank, category in enumerate(categories)}

    values = {}
    for category in categories:
        count = wanted[category]
        if category in _NAMED_POOLS:
            pool = _NAMED_POOLS[category]()
            if count > len(pool):
                raise CorpusError('InvalidSynthetic', f"at most {len(pool)} {category.value} names available",
                                  n_pii=n_pii)
            values[category] = _draw_distinct(rng, pool, count)
        else:
            values[category] = _NUMERIC_DRAWS[category](rng, count)

    planted_sentences = [[] for _ in range(n_emails)]
    planted_values = [[] for _ in range(n_emails)]
    cursors = {category: 0 for category in categories}
    for index in range(n_pii):
        category = categories[index % len(categories)]
        value = values[category][cursors[category]]
        cursors[category] += 1
        planted_sentences[index % n_emails].append(PII_SENTENCES[category].format(value))
        planted_values[index % n_emails].append((category, canonicalize(value, category)))

    records, planted_by_record = [], {}
    for position, pii_sentences in enumerate(planted_sentences, 1):
        filler = [FILLER_SENTENCES[i] for i in rng.choice(len(FILLER_SENTENCES), size=FILLER_PER_EMAIL,
                                                          replace=False).tolist()]
        sentences = filler[:2] + pii_sentences + filler[2:]
        subject = SUBJECTS[int(rng.integers(len(SUBJECTS)))]
        folder = FOLDERS[int(rng.integers(len(FOLDERS)))]
        record_id = f"email-{position:05d}"
        records.append(EmailRecord.from_fields(record_id, folder, subject, ' '.join(sentences)))
        planted_by_record[record_id] = PiiSet(frozenset(planted_values[position - 1]), Provenance.GROUND_TRUTH)

    gazetteer = {category.value: sorted(canonicalize(name, category) for name in values[category])
                 for category in _NAMED_POOLS if values[category]}
    planted = PiiSet(frozenset((category, canonicalize(value, category))
                               for category in categories for value in values[category]), Provenance.GROUND_TRUTH)
    logger.info(f"Generated {len(records)} synthetic emails with {len(planted)} planted PIIs (seed {seed})")
    return SyntheticCorpus(records=records, gazetteer=gazetteer, planted=planted,
                           planted_by_record=planted_by_record)
