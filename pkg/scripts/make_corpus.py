"""Generate the bundled English-like training corpus (data/corpus.txt).

The text comes from a small stochastic grammar with Zipf-weighted word
choice, paragraph-level protagonists and quoted dialogue, so a character
model has local spelling, word order and some longer-range structure to
learn.  Output is fully determined by ``--seed``.  Released into the public
domain.

    python scripts/make_corpus.py --out data/corpus.txt --chars 1000000
"""
import argparse
import random
from pathlib import Path

NAMES = """Anna Bertram Clara Dorian Edith Felix Greta Hugo Iris Jasper Kitty Lionel
Martha Nolan Olive Percy Rosa Silas Tilda Victor Winnie Arthur Beatrice Cyril""".split()
PLACES = """the mill|the harbour|the old church|the market|the orchard|the river|the inn|
the station|the library|the garden|the farm|the hill|the bridge|the school|the forest|
the kitchen|the village|the road|the shore|the cellar""".replace("\n", "").split("|")
NOUNS = """man woman child dog horse letter door window house tree stone road boat
cart lamp book candle coat hat basket bottle apple bread field storm wind sun moon
star cloud fire bell clock key chair table bed wall roof gate fence path river sea
ship sail rope net fish bird cat mouse wolf fox sheep cow pig goose hen egg cup
plate knife spoon ring coin purse box bag shoe glove stick pipe song story voice
face hand eye head heart friend brother sister father mother uncle aunt stranger
doctor soldier sailor farmer baker teacher priest servant king queen prince
garden flower leaf branch rain snow morning evening night day week year hour
minute moment answer question reason promise secret dream fear hope""".split()
ADJS = """old young little great small large dark bright cold warm quiet loud
strange kind cruel happy sad tired hungry poor rich grey green red white black
brown golden heavy light tall short long narrow wide deep empty full broken
gentle wild clever foolish proud humble honest careful sudden distant near
early late pale sharp soft hard sweet bitter wet dry""".split()
VERBS_T = [
    ("see", "saw"), ("find", "found"), ("take", "took"), ("carry", "carried"),
    ("open", "opened"), ("close", "closed"), ("hold", "held"), ("watch", "watched"),
    ("follow", "followed"), ("bring", "brought"), ("keep", "kept"), ("leave", "left"),
    ("want", "wanted"), ("remember", "remembered"), ("hear", "heard"), ("call", "called"),
    ("mend", "mended"), ("paint", "painted"), ("sell", "sold"), ("buy", "bought"),
    ("lose", "lost"), ("break", "broke"), ("read", "read"), ("write", "wrote"),
    ("love", "loved"), ("fear", "feared"), ("meet", "met"), ("help", "helped"),
]
VERBS_I = [
    ("walk", "walked"), ("run", "ran"), ("sleep", "slept"), ("laugh", "laughed"),
    ("wait", "waited"), ("sing", "sang"), ("cry", "cried"), ("smile", "smiled"),
    ("sit", "sat"), ("stand", "stood"), ("listen", "listened"), ("rest", "rested"),
    ("work", "worked"), ("return", "returned"), ("arrive", "arrived"), ("fall", "fell"),
]
ADVS = """slowly quickly quietly softly suddenly carefully gladly sadly again
already never always often once still almost nearly""".split()
PREPS = "to|from|near|behind|beside|across|into|towards|past|beyond".split("|")
CONJ = ["and", "but", "so", "while", "because", "until", "when"]
SAY = ["said", "asked", "whispered", "cried", "answered", "replied", "called"]


class Grammar:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self._w = {}

    def zipf(self, words):
        key = id(words)
        if key not in self._w:
            self._w[key] = [1.0 / (i + 1) ** 0.9 for i in range(len(words))]
        return self.rng.choices(words, weights=self._w[key])[0]

    def np(self, definite=None):
        r = self.rng
        noun = self.zipf(NOUNS)
        det = definite or r.choice(["the", "the", "a", "his", "her", "that", "every"])
        if det == "a" and noun[0] in "aeiou":
            det = "an"
        if r.random() < 0.45:
            adj = self.zipf(ADJS)
            if det == "an" and adj[0] not in "aeiou":
                det = "a"
            elif det == "a" and adj[0] in "aeiou":
                det = "an"
            return f"{det} {adj} {noun}"
        return f"{det} {noun}"

    def clause(self, subj):
        r = self.rng
        roll = r.random()
        if roll < 0.45:
            v = self.zipf(VERBS_T)[1]
            s = f"{subj} {v} {self.np()}"
        elif roll < 0.75:
            v = self.zipf(VERBS_I)[1]
            s = f"{subj} {v}"
            if r.random() < 0.6:
                s += f" {r.choice(PREPS)} {r.choice(PLACES)}"
        else:
            s = f"{subj} was {self.zipf(ADJS)}"
        if r.random() < 0.25:
            s += f" {self.zipf(ADVS)}"
        return s

    def sentence(self, hero, pron):
        r = self.rng
        subj = r.choice([hero, hero, pron, self.np("the")])
        s = self.clause(subj)
        if r.random() < 0.35:
            s += f" {r.choice(CONJ)} " + self.clause(r.choice([pron, self.np("the")]))
        s = s[0].upper() + s[1:]
        if r.random() < 0.15:
            speech = self.clause(r.choice(["I", "we", "you", "the " + self.zipf(NOUNS)]))
            speech = speech[0].upper() + speech[1:]
            mark = "?" if r.random() < 0.3 else "."
            return f'"{speech}{mark}" {r.choice(SAY)} {hero}.'
        return s + "."

    def paragraph(self):
        r = self.rng
        hero = r.choice(NAMES)
        pron = r.choice(["he", "she"])
        n = r.randint(3, 8)
        return " ".join(self.sentence(hero, pron) for _ in range(n))


def generate(n_chars: int, seed: int) -> str:
    g = Grammar(random.Random(seed))
    out, size, chapter = [], 0, 0
    while size < n_chars:
        if chapter == 0 or g.rng.random() < 0.02:
            chapter += 1
            head = f"CHAPTER {chapter}\n\n"
            out.append(head)
            size += len(head)
        para = g.paragraph() + "\n\n"
        out.append(para)
        size += len(para)
    return "".join(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/corpus.txt")
    ap.add_argument("--chars", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=1893)
    args = ap.parse_args()
    text = generate(args.chars, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text, encoding="utf-8")
    print(f"wrote {len(text)} characters to {args.out}")


if __name__ == "__main__":
    main()
