"""Synthetic typed knowledge graph with templated sentences.

Entities come in five types (person, city, country, company, university)
and ten relations connect them under a fixed schema. Citizenship follows
from the birthplace's country, spouses are symmetric, and every triplet is
realized by one sentence per template of its relation.
"""

import os
from dataclasses import dataclass

import numpy as np

RELATION_TEMPLATES = {
    "born_in": ("{h} was born in {t}", "{h} is a native of {t}", "the birthplace of {h} is {t}"),
    "lives_in": ("{h} lives in {t}", "{h} resides in {t}", "{h} has a home in {t}"),
    "citizen_of": ("{h} is a citizen of {t}", "{h} holds a passport from {t}", "{h} has the nationality of {t}"),
    "works_for": ("{h} works for {t}", "{h} is employed by {t}", "{h} has a job at {t}"),
    "educated_at": ("{h} studied at {t}", "{h} graduated from {t}", "{h} attended {t}"),
    "spouse": ("{h} is married to {t}", "{h} is the spouse of {t}", "{h} wed {t}"),
    "located_in": ("{h} is a city in {t}", "{h} lies within {t}", "{h} is located in {t}"),
    "headquartered_in": ("{h} is headquartered in {t}", "{h} has its main office in {t}",
                         "the head office of {h} is in {t}"),
    "founded_by": ("{h} was founded by {t}", "{h} was started by {t}", "the founder of {h} is {t}"),
    "campus_in": ("{h} has a campus in {t}", "{h} is based in {t}", "students of {h} gather in {t}"),
}

_SYLLABLES = ("ka", "lo", "ri", "ven", "tor", "mi", "sa", "del", "bar", "no", "qui", "zen", "ta",
              "pel", "dor", "fi", "gra", "lun", "mor", "vas", "ke", "jo", "ur", "sil", "bex")


@dataclass
class SyntheticKG:
    triples: list          # (head, relation, tail) names
    aliases: list          # (surface, entity name)
    sentences: list        # (text, (head, relation, tail))
    entity_types: dict

    def write(self, out_dir, prefix=""):
        os.makedirs(out_dir, exist_ok=True)
        paths = {}
        for key, rows in (("triples", self.triples), ("aliases", self.aliases)):
            paths[key] = os.path.join(out_dir, f"{prefix}{key}.tsv")
            with open(paths[key], "w", encoding="utf-8") as fh:
                fh.writelines("\t".join(r) + "\n" for r in rows)
        paths["corpus"] = os.path.join(out_dir, f"{prefix}corpus.txt")
        with open(paths["corpus"], "w", encoding="utf-8") as fh:
            fh.writelines(text + "\n" for text, _ in self.sentences)
        return paths


def _names(rng, count, taken, parts=2):
    out = []
    while len(out) < count:
        word = "".join(rng.choice(_SYLLABLES, size=parts))
        if word not in taken:
            taken.add(word)
            out.append(word)
    return out


def generate(seed=0, n_persons=100, n_cities=40, n_countries=10, n_companies=30, n_universities=20):
    """Build the KG, its aliases and one sentence per (triplet, template)."""
    rng = np.random.default_rng(seed)
    taken = {w for tpls in RELATION_TEMPLATES.values() for t in tpls for w in t.split()}
    first = _names(rng, 20, taken)
    last = _names(rng, 20, taken, parts=3)
    combos = [(f, s) for f in first for s in last]
    picked = rng.choice(len(combos), size=n_persons, replace=False)
    persons = [combos[i] for i in picked]
    cities = _names(rng, n_cities, taken, parts=3)
    countries = [w + "ia" for w in _names(rng, n_countries, taken)]
    companies = [(w, "corp") for w in _names(rng, n_companies, taken)]
    universities = [(w, "institute") for w in _names(rng, n_universities, taken)]

    surfaces, types = {}, {}

    def entity(parts, kind):
        name = "_".join(p.capitalize() for p in parts)
        surfaces[name] = " ".join(parts)
        types[name] = kind
        return name

    P = [entity(p, "person") for p in persons]
    C = [entity((c,), "city") for c in cities]
    N = [entity((c,), "country") for c in countries]
    O = [entity(c, "company") for c in companies]
    U = [entity(u, "university") for u in universities]

    triples = []
    country_of = {}
    for i, city in enumerate(C):
        country_of[city] = N[i % len(N)]
        triples.append((city, "located_in", country_of[city]))
    for org in O:
        triples.append((org, "headquartered_in", C[rng.integers(len(C))]))
        triples.append((org, "founded_by", P[rng.integers(len(P))]))
    for uni in U:
        triples.append((uni, "campus_in", C[rng.integers(len(C))]))
    for p in P:
        birth = C[rng.integers(len(C))]
        home = C[rng.integers(len(C))]
        triples.append((p, "born_in", birth))
        triples.append((p, "lives_in", home))
        triples.append((p, "citizen_of", country_of[birth]))
        triples.append((p, "works_for", O[rng.integers(len(O))]))
        triples.append((p, "educated_at", U[rng.integers(len(U))]))
    order = rng.permutation(len(P))
    for a, b in zip(order[0:len(P) // 2:2], order[1:len(P) // 2:2]):
        triples.append((P[a], "spouse", P[b]))
        triples.append((P[b], "spouse", P[a]))

    sentences = []
    for h, r, t in triples:
        for tpl in RELATION_TEMPLATES[r]:
            sentences.append((tpl.format(h=surfaces[h], t=surfaces[t]), (h, r, t)))
    aliases = [(surfaces[name], name) for name in surfaces]
    return SyntheticKG(triples, aliases, sentences, types)
