"""Closed-vocabulary whitespace tokenizer and word vocabulary."""

import json

PAD, UNK, CLS, MASK = "[PAD]", "[UNK]", "[CLS]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, MASK)
PAD_ID, UNK_ID, CLS_ID, MASK_ID = range(4)


def normalize(text):
    """Lowercase and split on runs of whitespace."""
    return text.lower().split()


class Vocabulary:
    """Word vocabulary with the four reserved tokens at ids 0-3."""

    def __init__(self, words=()):
        self.itos = list(SPECIALS)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word):
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    @classmethod
    def build(cls, texts):
        vocab = cls()
        for text in texts:
            for w in normalize(text):
                vocab.add(w)
        return vocab

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi

    def lookup(self, word):
        return self.stoi.get(word, UNK_ID)

    @property
    def n_special(self):
        return len(SPECIALS)

    def to_json(self):
        return json.dumps(self.itos[len(SPECIALS):])

    @classmethod
    def from_list(cls, words):
        vocab = cls()
        for w in words:
            if w in SPECIALS:
                continue
            vocab.add(w)
        return vocab


def tokenize(sentence, vocab):
    """Map a sentence to word ids; unseen words become the UNK id."""
    return [vocab.lookup(w) for w in normalize(sentence)]
