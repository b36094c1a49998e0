#!/usr/bin/env python3
"""Regenerates data/sample/corpus.jsonl, the small synthetic corpus used by
the demo pipeline and the end-to-end tests.

Documents are short structured paragraphs built from templates. Each one
keeps a single subject across its sentences, and document lengths vary so
the complexity strata are populated.
"""

import json
import random
from pathlib import Path

SEED = 20240611
TARGET_BYTES = 50_000

TOPICS = {
    "garden": {
        "subjects": ["The garden", "Our garden", "The small garden", "The old garden"],
        "things": ["tomatoes", "beans", "roses", "herbs", "carrots", "tulips"],
        "verbs": ["grows", "needs", "holds", "shelters"],
        "people": ["the gardener", "my aunt", "the neighbor", "a student"],
        "places": ["near the wall", "by the gate", "under the tree", "beside the path"],
        "times": ["in spring", "each morning", "after the rain", "in late summer"],
    },
    "harbor": {
        "subjects": ["The harbor", "The busy harbor", "The north harbor", "The fishing harbor"],
        "things": ["boats", "nets", "crates", "ropes", "gulls", "sails"],
        "verbs": ["shelters", "holds", "welcomes", "guards"],
        "people": ["the captain", "a fisher", "the harbor master", "two sailors"],
        "places": ["by the pier", "near the lighthouse", "along the dock", "at the breakwater"],
        "times": ["at dawn", "before the storm", "each evening", "in winter"],
    },
    "library": {
        "subjects": ["The library", "The town library", "The quiet library", "The new library"],
        "things": ["books", "maps", "letters", "journals", "records", "atlases"],
        "verbs": ["keeps", "lends", "collects", "stores"],
        "people": ["the librarian", "a reader", "the archivist", "a child"],
        "places": ["on the top shelf", "in the reading room", "near the window", "in the basement"],
        "times": ["every weekday", "on rainy days", "after school", "in the evening"],
    },
    "kitchen": {
        "subjects": ["The kitchen", "The bakery kitchen", "The warm kitchen", "The family kitchen"],
        "things": ["bread", "soup", "pies", "rolls", "cakes", "stews"],
        "verbs": ["makes", "serves", "bakes", "prepares"],
        "people": ["the cook", "the baker", "my brother", "an apprentice"],
        "places": ["by the oven", "at the long table", "near the sink", "on the counter"],
        "times": ["before sunrise", "at noon", "on holidays", "every friday"],
    },
    "forest": {
        "subjects": ["The forest", "The pine forest", "The dark forest", "The river forest"],
        "things": ["owls", "deer", "mushrooms", "ferns", "foxes", "moss"],
        "verbs": ["hides", "shelters", "feeds", "protects"],
        "people": ["the ranger", "a hiker", "the painter", "a hunter"],
        "places": ["along the creek", "on the ridge", "near the clearing", "under the oaks"],
        "times": ["at dusk", "in autumn", "after the frost", "during the night"],
    },
    "workshop": {
        "subjects": ["The workshop", "The clock workshop", "The busy workshop", "The small workshop"],
        "things": ["clocks", "chairs", "tools", "gears", "lamps", "boxes"],
        "verbs": ["builds", "repairs", "sells", "stores"],
        "people": ["the carpenter", "the clockmaker", "an apprentice", "my uncle"],
        "places": ["at the bench", "near the door", "in the back room", "by the window"],
        "times": ["every afternoon", "in the morning", "before the fair", "on weekends"],
    },
}

OPENERS = [
    "{S} {v} {t1}.",
    "{S} is known for its {t1}.",
    "{S} has {t1} and {t2}.",
]
MIDDLES = [
    "{P} checks the {t1} {time}.",
    "The {t2} stay {place}.",
    "{P} likes the {t1} {place}.",
    "Most of the {t1} arrive {time}.",
    "{P} counts the {t2} {time}.",
    "Visitors see the {t1} {place}.",
    "The {t1} and the {t2} share the space {place}.",
    "{P} moves the {t2} {place}.",
]
CLOSERS = [
    "In the end, {s} feels calm.",
    "That is why people return to {s}.",
    "So {s} stays busy {time}.",
]


def lower_subject(s):
    return s[0].lower() + s[1:]


def make_document(rng):
    topic = TOPICS[rng.choice(sorted(TOPICS))]
    subject = rng.choice(topic["subjects"])
    t1, t2 = rng.sample(topic["things"], 2)
    person = rng.choice(topic["people"])
    fill = {
        "S": subject,
        "s": lower_subject(subject),
        "v": rng.choice(topic["verbs"]),
        "t1": t1,
        "t2": t2,
        "P": person[0].upper() + person[1:],
    }
    n_middle = rng.choice([0, 0, 1, 1, 2, 2, 3, 4, 5])
    sentences = [rng.choice(OPENERS)]
    sentences += rng.sample(MIDDLES, n_middle)
    if rng.random() < 0.6:
        sentences.append(rng.choice(CLOSERS))
    out = []
    for s in sentences:
        fill["time"] = rng.choice(topic["times"])
        fill["place"] = rng.choice(topic["places"])
        out.append(s.format(**fill))
    return " ".join(out)


def main():
    rng = random.Random(SEED)
    path = Path(__file__).resolve().parent.parent / "data" / "sample" / "corpus.jsonl"
    lines, size = [], 0
    while size < TARGET_BYTES:
        line = json.dumps({"text": make_document(rng)}) + "\n"
        lines.append(line)
        size += len(line.encode())
    path.write_text("".join(lines))
    print(f"wrote {len(lines)} documents, {size} bytes to {path}")


if __name__ == "__main__":
    main()
