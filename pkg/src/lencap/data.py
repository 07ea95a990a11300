"""Synthetic scene -> multi-length caption corpus.

Each scene is a short chain of objects ("a small red dog next to a car ...")
in a setting, optionally with a time/weather modifier. A scene is turned
into an ordered list of *mention units* (one scene attribute each). A
caption of target length L mentions the longest prefix of units that fits,
then pads with neutral filler phrases to land exactly on L. Coverage is
forced to strictly increase across the five length bands, so longer
references always mention more of the scene.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nncore import make_rng

CATEGORIES = ["dog", "cat", "horse", "bird", "man", "woman", "car", "truck",
              "bicycle", "bench", "boat", "tree"]
COLORS = ["red", "blue", "green", "black", "white", "brown", "yellow", "gray"]
SIZES = ["small", "large", "tiny"]
RELATIONS = ["next to", "behind", "in front of", "near", "beside", "on top of"]
SETTINGS = ["in a park", "on a street", "in a kitchen", "on a beach", "in a field", "in a room"]
MODIFIERS = ["at night", "on a sunny day", "in the rain", "in the snow"]

TARGET_LENGTHS = (7, 10, 16, 22, 28)
MAX_LENGTH = 30
FEATURE_DIM = 32
FEATURE_NOISE = 0.1

# filler slots: "<prefix> NP1 <verb> ... <tail>"
PREFIXES = {0: [""], 3: ["a photo of", "an image of"], 5: ["a close up photo of"]}
VERBS = {0: [""], 1: ["sitting"], 2: ["that is"], 3: ["that is sitting"]}
TAILS = {0: [""], 3: ["in this picture", "in this photo"], 5: ["as seen in this picture"]}

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = [PAD, BOS, EOS, UNK]

_MULTIHOT_DIM = 4 * (len(CATEGORIES) + len(COLORS) + len(SIZES)) + 3 * len(RELATIONS) \
    + len(SETTINGS) + len(MODIFIERS)


@dataclass(frozen=True)
class SceneObject:
    category: str
    color: str | None = None
    size: str | None = None


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    relations: tuple[str, ...]
    setting: str
    modifier: str | None = None

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 4:
            raise ValueError("a scene has 1 to 4 objects")
        if len(self.relations) != len(self.objects) - 1:
            raise ValueError("need exactly one relation per consecutive object pair")

    def signature(self) -> str:
        return json.dumps(scene_to_dict(self), sort_keys=True)

    def attributes(self) -> set[str]:
        """Every mentionable attribute, as stable string keys."""
        return {u.key for u in mention_units(self)}


def scene_to_dict(scene: Scene) -> dict:
    return {
        "objects": [asdict(o) for o in scene.objects],
        "relations": list(scene.relations),
        "setting": scene.setting,
        "modifier": scene.modifier,
    }


def scene_from_dict(d: dict) -> Scene:
    return Scene(
        objects=tuple(SceneObject(**o) for o in d["objects"]),
        relations=tuple(d["relations"]),
        setting=d["setting"],
        modifier=d.get("modifier"),
    )


@dataclass(frozen=True)
class Unit:
    key: str      # attribute identity, e.g. "obj1.color"
    cost: int     # tokens it adds to a caption


def mention_units(scene: Scene) -> list[Unit]:
    """Scene attributes in the order captions mention them."""
    objs = scene.objects
    units = [Unit("obj0.category", 2), Unit("setting", len(scene.setting.split()))]

    def obj_units(k: int) -> list[Unit]:
        o = objs[k]
        out = []
        if k > 0:
            out.append(Unit(f"obj{k}.category", len(scene.relations[k - 1].split()) + 2))
        if o.color:
            out.append(Unit(f"obj{k}.color", 1))
        if o.size:
            out.append(Unit(f"obj{k}.size", 1))
        return out

    units += obj_units(0)
    if len(objs) > 1:
        units += obj_units(1)
    if scene.modifier:
        units.append(Unit("modifier", len(scene.modifier.split())))
    for k in range(2, len(objs)):
        units += obj_units(k)
    return units


def realize(scene: Scene, covered: set[str], prefix="", verb="", tail="") -> list[str]:
    """Token sequence mentioning exactly the attributes in ``covered``."""
    def np_(k):
        o = scene.objects[k]
        words = ["a"]
        if o.size and f"obj{k}.size" in covered:
            words.append(o.size)
        if o.color and f"obj{k}.color" in covered:
            words.append(o.color)
        words.append(o.category)
        return words

    toks: list[str] = prefix.split() + np_(0) + verb.split()
    for k in range(1, len(scene.objects)):
        if f"obj{k}.category" not in covered:
            break
        toks += scene.relations[k - 1].split() + np_(k)
    if "setting" in covered:
        toks += scene.setting.split()
    if scene.modifier and "modifier" in covered:
        toks += scene.modifier.split()
    toks += tail.split()
    return toks


def _filler_options(deficit: int) -> list[tuple[str, str, str]]:
    out = []
    for (lp, ps), (lv, vs), (lt, ts) in itertools.product(PREFIXES.items(), VERBS.items(),
                                                         TAILS.items()):
        if lp + lv + lt == deficit:
            out.extend(itertools.product(ps, vs, ts))
    return out


FILLER_CAPACITY = max(PREFIXES) + max(VERBS) + max(TAILS)


def coverage_plan(scene: Scene, lengths=TARGET_LENGTHS, slack: int = 1) -> dict[int, int] | None:
    """Number of mention units used at each target length, or None.

    Bands are planned from the longest down, each using strictly fewer units
    than the next longer one. A band prefers the most units that still allow
    an exact fit with fillers; overshooting by up to ``slack`` tokens is the
    fallback when that choice leaves no valid plan for the shorter bands.
    """
    units = mention_units(scene)
    cost = np.cumsum([u.cost for u in units])
    bands = sorted(lengths, reverse=True)

    def best_k(ceiling: int, limit: int) -> int:
        k = ceiling
        while k >= 1 and cost[k - 1] > limit:
            k -= 1
        return k

    def search(i: int, ceiling: int) -> dict[int, int] | None:
        if i == len(bands):
            return {}
        L = bands[i]
        tried = set()
        for limit in range(L, L + slack + 1):
            k = best_k(ceiling, limit)
            if k < 1 or k in tried or L - slack - cost[k - 1] > FILLER_CAPACITY:
                continue
            tried.add(k)
            rest = search(i + 1, k - 1)
            if rest is not None:
                return {L: k, **rest}
        return None

    return search(0, len(units))


def render_references(scene: Scene, target_lengths, seed: int) -> list[list[str]]:
    """One caption per target length, each within one token of its target."""
    plan = coverage_plan(scene, sorted(set(target_lengths)))
    if plan is None:
        raise ValueError("scene cannot be rendered at every target length")
    rng = make_rng(seed)
    units = mention_units(scene)
    cost = np.cumsum([u.cost for u in units])
    refs = []
    for L in target_lengths:
        k = plan[L]
        covered = {u.key for u in units[:k]}
        base = int(cost[k - 1])
        for target in (L, L - 1, L + 1):
            options = _filler_options(target - base)
            if options:
                prefix, verb, tail = options[int(rng.integers(len(options)))]
                break
        else:
            raise ValueError(f"no filler combination reaches length {L} +- 1")
        toks = realize(scene, covered, prefix, verb, tail)
        assert abs(len(toks) - L) <= 1
        refs.append(toks)
    return refs


def renderable(scene: Scene) -> bool:
    """Every band reachable, and the longest band mentions every attribute."""
    plan = coverage_plan(scene)
    return plan is not None and plan[max(TARGET_LENGTHS)] == len(mention_units(scene))


def random_scene(rng: np.random.Generator) -> Scene:
    n = int(rng.integers(1, 5))
    objects = []
    for _ in range(n):
        objects.append(SceneObject(
            category=CATEGORIES[int(rng.integers(len(CATEGORIES)))],
            color=COLORS[int(rng.integers(len(COLORS)))] if rng.random() < 0.6 else None,
            size=SIZES[int(rng.integers(len(SIZES)))] if rng.random() < 0.4 else None,
        ))
    relations = tuple(RELATIONS[int(rng.integers(len(RELATIONS)))] for _ in range(n - 1))
    setting = SETTINGS[int(rng.integers(len(SETTINGS)))]
    modifier = MODIFIERS[int(rng.integers(len(MODIFIERS)))] if rng.random() < 0.5 else None
    return Scene(tuple(objects), relations, setting, modifier)


# unit-count thresholds splitting scenes roughly evenly across the bands
RICHNESS_CUTS = (6, 7, 8, 9)
NATURAL_REFS = 2


def natural_band(scene: Scene) -> int:
    """Index of the band that suits the scene's richness."""
    return int(np.searchsorted(RICHNESS_CUTS, len(mention_units(scene))))


def draw_target_lengths(scene: Scene, rng: np.random.Generator, n: int = 5) -> list[int]:
    """Two references at the scene's natural band, the rest uniform over bands."""
    band = natural_band(scene)
    picks = [band] * min(NATURAL_REFS, n)
    picks += [int(i) for i in rng.integers(len(TARGET_LENGTHS), size=n - len(picks))]
    rng.shuffle(picks)
    return [TARGET_LENGTHS[i] for i in picks]


def multihot(scene: Scene) -> np.ndarray:
    v = np.zeros(_MULTIHOT_DIM)
    per_obj = len(CATEGORIES) + len(COLORS) + len(SIZES)
    for k, o in enumerate(scene.objects):
        base = k * per_obj
        v[base + CATEGORIES.index(o.category)] = 1.0
        if o.color:
            v[base + len(CATEGORIES) + COLORS.index(o.color)] = 1.0
        if o.size:
            v[base + len(CATEGORIES) + len(COLORS) + SIZES.index(o.size)] = 1.0
    off = 4 * per_obj
    for k, r in enumerate(scene.relations):
        v[off + k * len(RELATIONS) + RELATIONS.index(r)] = 1.0
    off += 3 * len(RELATIONS)
    v[off + SETTINGS.index(scene.setting)] = 1.0
    off += len(SETTINGS)
    if scene.modifier:
        v[off + MODIFIERS.index(scene.modifier)] = 1.0
    return v


def feature_projection(corpus_seed: int, dim: int = FEATURE_DIM) -> np.ndarray:
    rng = make_rng([corpus_seed, 0xFEA7])
    return rng.normal(0.0, 1.0 / np.sqrt(6.0), size=(dim, _MULTIHOT_DIM))


def scene_to_features(scene: Scene, seed, projection: np.ndarray,
                      noise: float = FEATURE_NOISE) -> np.ndarray:
    rng = make_rng(seed)
    clean = projection @ multihot(scene)
    return clean + rng.normal(0.0, noise, size=clean.shape)


@dataclass
class CaptionedImage:
    id: int
    split: str
    features: np.ndarray
    scene: Scene
    refs: list[list[str]]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "split": self.split,
            "features": [float(x) for x in self.features],
            "refs": self.refs,
            "scene": scene_to_dict(self.scene),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CaptionedImage":
        return cls(
            id=int(d["id"]),
            split=d["split"],
            features=np.asarray(d["features"], dtype=np.float64),
            scene=scene_from_dict(d["scene"]),
            refs=[list(r) for r in d["refs"]],
        )


@dataclass
class Corpus:
    images: list[CaptionedImage]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[CaptionedImage]:
        return [im for im in self.images if im.split == name]

    def by_id(self) -> dict[int, CaptionedImage]:
        return {im.id: im for im in self.images}


def gen_corpus(n_train: int = 2000, n_val: int = 250, n_test: int = 250, seed: int = 0,
               refs_per_image: int = 5) -> Corpus:
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("every split needs at least one image")
    scene_rng = make_rng([seed, 1])
    projection = feature_projection(seed)
    seen: set[str] = set()
    images = []
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    for image_id, split in enumerate(splits):
        while True:
            scene = random_scene(scene_rng)
            sig = scene.signature()
            if sig not in seen and renderable(scene):
                break
        seen.add(sig)
        img_rng = make_rng([seed, 2, image_id])
        targets = draw_target_lengths(scene, img_rng, refs_per_image)
        refs = render_references(scene, targets, seed=[seed, 3, image_id])
        feats = scene_to_features(scene, [seed, 4, image_id], projection)
        images.append(CaptionedImage(image_id, split, feats, scene, refs))
    return Corpus(images, seed=seed)


def write_corpus(corpus: Corpus, path: Path) -> None:
    with open(path, "w") as fh:
        for im in corpus.images:
            fh.write(json.dumps(im.to_json()) + "\n")


def read_corpus(path: Path) -> Corpus:
    images = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                images.append(CaptionedImage.from_json(json.loads(line)))
    if not images:
        raise ValueError(f"{path}: corpus is empty")
    return Corpus(images)


def marker_token(length: int) -> str:
    return f"<len_{length}>"


class Vocab:
    """Bidirectional token <-> id map; specials first, length markers last."""

    def __init__(self, tokens: list[str]):
        if tokens[:4] != SPECIALS:
            raise ValueError("vocab must start with " + ", ".join(SPECIALS))
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab tokens must be unique")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id, self.bos_id, self.eos_id, self.unk_id = range(4)
        self.marker_ids = {int(t[5:-1]): i for i, t in enumerate(self.tokens)
                           if t.startswith("<len_")}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def has_markers(self) -> bool:
        return bool(self.marker_ids)

    def base_tokens(self) -> list[str]:
        return [t for t in self.tokens if not t.startswith("<len_")]

    def encode(self, words: list[str]) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def marker_id(self, length: int) -> int:
        return self.marker_ids[length]

    def marker_length(self, token_id: int) -> int | None:
        tok = self.tokens[int(token_id)]
        return int(tok[5:-1]) if tok.startswith("<len_") else None

    def special_ids(self) -> list[int]:
        return [self.pad_id, self.bos_id, self.eos_id, self.unk_id]

    def content_hash(self) -> str:
        """Hash of the marker-free token list, used to match corpora to models."""
        return hashlib.sha256("\n".join(self.base_tokens()).encode()).hexdigest()[:16]

    def with_markers(self, max_length: int) -> "Vocab":
        return Vocab(self.base_tokens() + [marker_token(k) for k in range(1, max_length + 1)])

    def save(self, path: Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        return cls(Path(path).read_text().splitlines())


def build_vocab(corpus: Corpus, variant: str = "base", max_length: int = MAX_LENGTH) -> Vocab:
    words = sorted({w for im in corpus.images for ref in im.refs for w in ref})
    vocab = Vocab(SPECIALS + words)
    return vocab.with_markers(max_length) if variant == "marker" else vocab
