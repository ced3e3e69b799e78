"""Turn raw OIE triples into relation tags for a single sentence.

Shows which extractions the filters drop and how overlapping relations
collapse to the longest one before IOB2 encoding.
"""

from oietd.corpus import Sentence
from oietd.oie_post import TripleExtraction, build_relation_tagging, filter_extractions

T = TripleExtraction.from_spans

tokens = "Robbers broke into the bank on Monday and fled".split()
sentence = Sentence("demo", "doc", tokens)

extractions = [
    T("demo", (0, 1), (1, 3), (3, 5)),                       # broke into
    T("demo", (0, 1), (1, 2), (3, 5)),                       # broke (shadowed by the longer one)
    T("demo", (0, 1), (5, 6), (6, 7), is_implicit=True),     # implicit: dropped
    T("demo", (0, 1), (8, 9), (3, 5)),                       # object precedes relation: dropped
]

kept = filter_extractions(extractions)
print(f"{len(extractions)} extractions, {len(kept)} survive the filters")

tagging = build_relation_tagging(sentence, extractions)
for word, tag in zip(tokens, tagging.tags):
    print(f"{word:>8}  {tag}")
