#!/usr/bin/env python3
"""Generate the fixture corpus used by the tests and the desk experiment.

The output is synthetic English text produced from a small topical grammar
and is dedicated to the public domain (CC0). Documents are separated by a
blank line, sentences by a newline.

    python3 gen_corpus.py > corpus.txt
"""
import random

SEED = 20220
N_DOCS = 320

TOPICS = {
    "harbor": {
        "nouns": ["boat", "sailor", "harbor", "net", "fisherman", "tide", "lighthouse", "dock",
                  "anchor", "gull", "rope", "captain", "wave", "mast", "crew"],
        "verbs": ["repaired", "watched", "pulled", "painted", "carried", "tied", "counted", "loaded"],
        "adjs": ["old", "salty", "quiet", "rough", "grey", "wooden", "busy", "cold"],
        "places": ["near the pier", "along the coast", "by the breakwater", "at the fish market"],
    },
    "farm": {
        "nouns": ["farmer", "field", "barn", "cow", "tractor", "harvest", "orchard", "goat",
                  "wheat", "fence", "hen", "plough", "meadow", "shepherd", "sheep"],
        "verbs": ["planted", "fed", "fixed", "gathered", "sold", "moved", "watered", "cleared"],
        "adjs": ["green", "muddy", "golden", "tired", "small", "early", "dry", "wide"],
        "places": ["behind the barn", "in the valley", "on the hill", "beside the river"],
    },
    "city": {
        "nouns": ["street", "bus", "tower", "market", "bridge", "clerk", "square", "train",
                  "library", "cafe", "mayor", "station", "lamp", "crowd", "museum"],
        "verbs": ["crossed", "opened", "closed", "visited", "built", "cleaned", "rebuilt", "guarded"],
        "adjs": ["crowded", "bright", "narrow", "famous", "noisy", "modern", "ancient", "tall"],
        "places": ["in the old town", "across the river", "near the station", "at the main square"],
    },
    "kitchen": {
        "nouns": ["cook", "bread", "soup", "oven", "onion", "pan", "recipe", "butter",
                  "kettle", "knife", "apple", "spoon", "pie", "table", "baker"],
        "verbs": ["baked", "stirred", "sliced", "served", "tasted", "boiled", "mixed", "washed"],
        "adjs": ["warm", "sweet", "fresh", "bitter", "heavy", "simple", "spicy", "crisp"],
        "places": ["in the kitchen", "at the bakery", "over the fire", "on the long table"],
    },
    "sky": {
        "nouns": ["star", "planet", "comet", "telescope", "moon", "astronomer", "orbit", "cloud",
                  "eclipse", "galaxy", "observer", "night", "sun", "meteor", "chart"],
        "verbs": ["observed", "measured", "recorded", "tracked", "described", "predicted", "mapped", "noted"],
        "adjs": ["distant", "faint", "brilliant", "cold", "vast", "dark", "strange", "clear"],
        "places": ["above the mountains", "from the observatory", "over the desert", "in the southern sky"],
    },
    "music": {
        "nouns": ["song", "violin", "singer", "drum", "choir", "piano", "melody", "concert",
                  "composer", "flute", "orchestra", "rhythm", "hall", "guitar", "audience"],
        "verbs": ["played", "tuned", "wrote", "heard", "practiced", "sang", "performed", "arranged"],
        "adjs": ["loud", "gentle", "lively", "slow", "beautiful", "familiar", "sad", "joyful"],
        "places": ["in the concert hall", "at the festival", "in the chapel", "on the village green"],
    },
    "forest": {
        "nouns": ["tree", "fox", "owl", "path", "hunter", "deer", "moss", "stream",
                  "oak", "wolf", "ranger", "leaf", "bear", "trail", "cabin"],
        "verbs": ["followed", "found", "climbed", "crossed", "heard", "marked", "hid", "chased"],
        "adjs": ["deep", "wild", "silent", "shady", "tall", "hidden", "damp", "thick"],
        "places": ["in the pine forest", "beyond the ridge", "near the waterfall", "under the old oaks"],
    },
    "school": {
        "nouns": ["teacher", "student", "lesson", "book", "exam", "pencil", "classroom", "map",
                  "question", "essay", "library", "scholar", "lecture", "desk", "notebook"],
        "verbs": ["read", "explained", "studied", "answered", "graded", "copied", "discussed", "taught"],
        "adjs": ["careful", "difficult", "short", "curious", "patient", "long", "new", "clever"],
        "places": ["in the classroom", "at the university", "after the lecture", "in the reading room"],
    },
}

TIMES = ["in the morning", "at dawn", "by evening", "during the winter", "last spring",
         "every summer", "after the storm", "before noon", "at midnight", "on sunday"]
CONNECT = ["then", "later", "soon", "meanwhile", "afterwards", "finally", "again", "still"]
NAMES = ["anna", "tomas", "mira", "jonas", "elena", "pavel", "rosa", "ivan", "lena", "oskar",
         "nora", "felix", "clara", "hugo", "ines", "marek"]


def np(rng, t):
    a = rng.choice(t["adjs"]) + " " if rng.random() < 0.6 else ""
    return "the " + a + rng.choice(t["nouns"])


def sentence(rng, t, subj):
    form = rng.randrange(7)
    if form == 0:
        s = f"{subj} {rng.choice(t['verbs'])} {np(rng, t)} {rng.choice(t['places'])}"
    elif form == 1:
        s = f"{rng.choice(TIMES)} , {subj} {rng.choice(t['verbs'])} {np(rng, t)}"
    elif form == 2:
        s = f"{np(rng, t)} was {rng.choice(t['adjs'])} and {rng.choice(t['adjs'])} {rng.choice(TIMES)}"
    elif form == 3:
        s = f"{rng.choice(CONNECT)} {subj} {rng.choice(t['verbs'])} {np(rng, t)} and {np(rng, t)}"
    elif form == 4:
        s = f"{np(rng, t)} {rng.choice(t['verbs'])} {np(rng, t)} {rng.choice(t['places'])} {rng.choice(TIMES)}"
    elif form == 5:
        s = f"{subj} said that {np(rng, t)} was {rng.choice(t['adjs'])} ; {np(rng, t)} was not"
    else:
        s = f"nobody {rng.choice(t['verbs'])} {np(rng, t)} {rng.choice(t['places'])} , so {subj} {rng.choice(t['verbs'])} {np(rng, t)}"
    s = s.strip()
    return s[0].upper() + s[1:] + " ."


def main():
    rng = random.Random(SEED)
    topics = sorted(TOPICS)
    docs = []
    for _ in range(N_DOCS):
        t = TOPICS[rng.choice(topics)]
        name = rng.choice(NAMES).capitalize()
        n = rng.randint(6, 14)
        sents = []
        for k in range(n):
            subj = name if k == 0 or rng.random() < 0.5 else rng.choice(["she", "he", "they"])
            sents.append(sentence(rng, t, subj))
        docs.append("\n".join(sents))
    print("\n\n".join(docs))


if __name__ == "__main__":
    main()
