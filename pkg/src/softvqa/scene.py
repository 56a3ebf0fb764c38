"""Synthetic object scenes and templated questions.

Scenes stand in for detector output: each object carries discrete labels, a
position, a box and a simulated feature vector.  Questions are produced by
eight template families whose programs are written in the DSL of
:mod:`softvqa.catalog`; the answer always comes from the symbolic oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .catalog import FunctionCatalog
from .schema import BOOLEAN, AttributeSchema, default_schema
from .symbolic import Answer, SceneLabels, symbolic_execute

TEMPLATE_FAMILIES = (
    "query-chain",
    "exist-chain",
    "count-chain",
    "relate-chain",
    "compare-integer",
    "compare-attribute",
    "same-attribute",
    "logical-and/or",
)

# surface order of adjectives inside a noun phrase; the shape (if any) is the noun
PHRASE_ORDER = ("size", "color", "material", "shape")

# (axis, sign): object j is in relation r to reference i iff sign * (pos_j - pos_i)[axis] > 0
_RELATION_GEOMETRY = {"left": (0, -1), "right": (0, 1), "front": (1, -1), "behind": (1, 1)}
RELATION_WORDS = {"left": ("left", "of"), "right": ("right", "of"),
                  "front": ("in", "front", "of"), "behind": ("behind",)}

SIZE_EXTENT = {"small": 0.06, "large": 0.12}


class ConfigError(ValueError):
    """Invalid generator or dataset configuration."""


class Resample(Exception):
    """The requested template cannot be realised on this scene."""


@dataclass
class SceneConfig:
    max_objects: int = 10  # A
    min_objects: int = 3
    num_objects: int | None = None  # fixed count overrides the [min, max] range
    d_feat: int = 32
    noise_sigma: float = 0.1
    feature_seed: int = 1234
    min_gap: float = 0.01
    schema: AttributeSchema = field(default_factory=default_schema)

    def __post_init__(self):
        lo = self.num_objects if self.num_objects is not None else self.min_objects
        hi = self.num_objects if self.num_objects is not None else self.max_objects
        if not (1 <= lo <= hi <= self.max_objects):
            raise ConfigError(f"object count range [{lo}, {hi}] outside [1, {self.max_objects}]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if self.min_gap * hi >= 0.9:
            raise ConfigError("min_gap too large for the number of objects")
        for r in self.schema.relations:
            if r not in _RELATION_GEOMETRY:
                raise ConfigError(f"no geometric rule for relation {r!r}")

    def projection(self) -> np.ndarray:
        """The fixed (C, d_feat) map from concatenated one-hot labels to features."""
        rng = np.random.default_rng(self.feature_seed)
        return rng.standard_normal((self.schema.num_categorical, self.d_feat))


@dataclass
class ObjectRecord:
    attrs: dict  # family -> value index
    position: tuple
    bbox: tuple  # (x, y, w, h), centred on the position
    feature: np.ndarray


@dataclass
class Scene:
    objects: list
    relations: np.ndarray  # bool (n, n, R)
    schema: AttributeSchema
    id: int = 0

    @property
    def n(self) -> int:
        return len(self.objects)

    def labels(self) -> SceneLabels:
        attrs = {f: np.array([o.attrs[f] for o in self.objects], dtype=int) for f in self.schema.family_names}
        return SceneLabels(attrs, self.relations.copy())

    def features(self) -> np.ndarray:
        return np.stack([o.feature for o in self.objects])

    def locations(self) -> np.ndarray:
        return np.array([o.bbox for o in self.objects], dtype=float)

    def describe(self, i: int) -> str:
        o = self.objects[i]
        return " ".join(self.schema.values[f][o.attrs[f]] for f in PHRASE_ORDER if f in o.attrs)


def one_hot_labels(schema: AttributeSchema, attrs: dict) -> np.ndarray:
    v = np.zeros(schema.num_categorical)
    for fam in schema.family_names:
        v[schema.offsets[fam] + attrs[fam]] = 1.0
    return v


def relations_from_positions(pos: np.ndarray, relations: tuple) -> np.ndarray:
    n = len(pos)
    out = np.zeros((n, n, len(relations)), dtype=bool)
    for r, name in enumerate(relations):
        axis, sign = _RELATION_GEOMETRY[name]
        d = pos[None, :, axis] - pos[:, None, axis]  # d[i, j] = pos_j - pos_i
        out[:, :, r] = sign * d > 0
    return out


def _sample_positions(n: int, gap: float, rng: np.random.Generator) -> np.ndarray:
    pos = np.zeros((n, 2))
    for k in range(n):
        for _ in range(10_000):
            p = rng.uniform(0.05, 0.95, size=2)
            if k == 0 or np.all(np.abs(pos[:k] - p) > gap):
                pos[k] = p
                break
        else:  # pragma: no cover - unreachable for validated configs
            raise ConfigError("could not place objects without ties")
    return pos


def generate_scene(config: SceneConfig, rng: np.random.Generator, scene_id: int = 0,
                   projection: np.ndarray | None = None) -> Scene:
    schema = config.schema
    if config.num_objects is not None:
        n = config.num_objects
    else:
        n = int(rng.integers(config.min_objects, config.max_objects + 1))
    proj = config.projection() if projection is None else projection
    pos = _sample_positions(n, config.min_gap, rng)
    labels = [{f: int(rng.integers(schema.cardinality(f))) for f in schema.family_names} for _ in range(n)]
    objects = []
    for k in range(n):
        onehot = one_hot_labels(schema, labels[k])
        feat = onehot @ proj
        if config.noise_sigma > 0:
            feat = feat + rng.normal(0.0, config.noise_sigma, size=config.d_feat)
        ext = SIZE_EXTENT.get(schema.values["size"][labels[k]["size"]], 0.08) if "size" in labels[k] else 0.08
        objects.append(ObjectRecord(labels[k], (float(pos[k, 0]), float(pos[k, 1])),
                                    (float(pos[k, 0]), float(pos[k, 1]), ext, ext), feat))
    return Scene(objects, relations_from_positions(pos, schema.relations), schema, scene_id)


# ---------------------------------------------------------------------------
# questions


@dataclass
class QuestionSample:
    scene_id: int
    words: tuple
    program: tuple  # ((function name, argument or None), ...)
    answer: Answer
    question_type: str
    template: str = ""
    qa: bool = True
    sup: bool = False

    @property
    def text(self) -> str:
        return " ".join(self.words)


def _plural(word: str) -> str:
    return word + "s"


def noun_phrase(schema: AttributeSchema, filters, plural: bool = False) -> list:
    """Words for a filter list, in the fixed adjective order; the noun is the shape or 'thing'."""
    by_fam = dict(filters)
    words = [by_fam[f] for f in PHRASE_ORDER if f in by_fam and f != "shape"]
    noun = by_fam.get("shape", "thing")
    return words + [_plural(noun) if plural else noun]


def _ordered(filters) -> list:
    rank = {f: k for k, f in enumerate(PHRASE_ORDER)}
    return sorted(filters, key=lambda fv: rank.get(fv[0], len(rank)))


def _filter_steps(filters) -> list:
    return [(f"filter_{fam}", val) for fam, val in _ordered(filters)]


def _matches(scene: Scene, filters) -> list:
    sch = scene.schema
    return [i for i, o in enumerate(scene.objects)
            if all(o.attrs[f] == sch.value_index(f, v) for f, v in filters)]


def _unique_description(scene: Scene, i: int, rng: np.random.Generator, exclude=(), max_filters: int = 2):
    """A shortest filter list (at most ``max_filters``) singling out object ``i``, or None."""
    fams = [f for f in scene.schema.family_names if f not in exclude]
    o = scene.objects[i]
    order = list(rng.permutation(len(fams)))
    singles = [[(fams[k], scene.schema.values[fams[k]][o.attrs[fams[k]]])] for k in order]
    for flt in singles:
        if _matches(scene, flt) == [i]:
            return _ordered(flt)
    if max_filters < 2:
        return None
    pairs = [singles[a] + singles[b] for a in range(len(singles)) for b in range(a + 1, len(singles))]
    for k in rng.permutation(len(pairs)):
        if _matches(scene, pairs[k]) == [i]:
            return _ordered(pairs[k])
    return None


def _random_filters(schema: AttributeSchema, rng: np.random.Generator, k: int, exclude=()) -> list:
    fams = [f for f in schema.family_names if f not in exclude]
    chosen = [fams[j] for j in rng.choice(len(fams), size=k, replace=False)]
    return _ordered([(f, schema.values[f][int(rng.integers(schema.cardinality(f)))]) for f in chosen])


def _object_filters(scene: Scene, i: int, rng: np.random.Generator, k: int, exclude=()) -> list:
    fams = [f for f in scene.schema.family_names if f not in exclude]
    chosen = [fams[j] for j in rng.choice(len(fams), size=k, replace=False)]
    o = scene.objects[i]
    return _ordered([(f, scene.schema.values[f][o.attrs[f]]) for f in chosen])


def _pick_referent(scene, rng, exclude=(), max_filters=2):
    for i in rng.permutation(scene.n):
        flt = _unique_description(scene, int(i), rng, exclude, max_filters)
        if flt is not None:
            return int(i), flt
    raise Resample("no uniquely describable object")


def _t_query(scene, rng, want):
    fams = scene.schema.family_names
    g = fams[int(rng.integers(len(fams)))]
    _, flt = _pick_referent(scene, rng, exclude=(g,))
    words = ["what", g, "is", "the"] + noun_phrase(scene.schema, flt)
    return words, [("scene", None)] + _filter_steps(flt) + [("unique", None), (f"query_{g}", None)]


def _t_exist(scene, rng, want):
    k = int(rng.integers(1, 3))
    if want:
        flt = _object_filters(scene, int(rng.integers(scene.n)), rng, k)
    else:
        flt = _random_filters(scene.schema, rng, k)
    words = ["is", "there", "a"] + noun_phrase(scene.schema, flt)
    return words, [("scene", None)] + _filter_steps(flt) + [("exist", None)]


def _t_count(scene, rng, want):
    k = int(rng.integers(1, 3))
    if rng.random() < 0.7:
        flt = _object_filters(scene, int(rng.integers(scene.n)), rng, k)
    else:
        flt = _random_filters(scene.schema, rng, k)
    words = ["how", "many"] + noun_phrase(scene.schema, flt, plural=True) + ["are", "there"]
    return words, [("scene", None)] + _filter_steps(flt) + [("count", None)]


def _t_relate(scene, rng, want):
    rels = scene.schema.relations
    r = rels[int(rng.integers(len(rels)))]
    _, flt = _pick_referent(scene, rng)
    np_words = ["the"] + noun_phrase(scene.schema, flt)
    head = [("scene", None)] + _filter_steps(flt) + [("unique", None), ("relate", r)]
    if want is None:
        return ["how", "many", "things", "are"] + list(RELATION_WORDS[r]) + np_words, head + [("count", None)]
    return ["is", "there", "a", "thing"] + list(RELATION_WORDS[r]) + np_words, head + [("exist", None)]


_CMP_WORDS = {
    "greater_than": (["are", "there", "more"], ["than"]),
    "less_than": (["are", "there", "fewer"], ["than"]),
    "equal_integer": (["are", "there", "the", "same", "number", "of"], ["and"]),
}


def _t_compare_integer(scene, rng, want):
    sch = scene.schema
    fams = sch.family_names
    fam = fams[int(rng.integers(len(fams)))]
    a, b = rng.choice(sch.cardinality(fam), size=2, replace=False)
    fa = [(fam, sch.values[fam][int(a)])]
    fb = [(fam, sch.values[fam][int(b)])]
    cmp = ("greater_than", "less_than", "equal_integer")[int(rng.integers(3))]
    pre, mid = _CMP_WORDS[cmp]
    words = pre + noun_phrase(sch, fa, plural=True) + mid + noun_phrase(sch, fb, plural=True)
    prog = ([("scene", None)] + _filter_steps(fa) + [("count", None)]
            + [("scene", None)] + _filter_steps(fb) + [("count", None), (cmp, None)])
    return words, prog


def _t_compare_attribute(scene, rng, want):
    sch = scene.schema
    fams = sch.family_names
    g = fams[int(rng.integers(len(fams)))]
    i, fa = _pick_referent(scene, rng, exclude=(g,), max_filters=1)
    others = [j for j in rng.permutation(scene.n) if j != i]
    if want is not None:
        same = [j for j in others if (scene.objects[j].attrs[g] == scene.objects[i].attrs[g]) == want]
        others = same + [j for j in others if j not in same]
    for j in others:
        fb = _unique_description(scene, int(j), rng, exclude=(g,), max_filters=1)
        if fb is not None:
            break
    else:
        raise Resample("no second referent")
    words = (["does", "the"] + noun_phrase(sch, fa) + ["have", "the", "same", g, "as", "the"]
             + noun_phrase(sch, fb))
    prog = ([("scene", None)] + _filter_steps(fa) + [(f"query_{g}", None)]
            + [("scene", None)] + _filter_steps(fb) + [(f"query_{g}", None), (f"equal_{g}", None)])
    return words, prog


def _t_same(scene, rng, want):
    fams = scene.schema.family_names
    g = fams[int(rng.integers(len(fams)))]
    _, flt = _pick_referent(scene, rng, exclude=(g,))
    np_words = ["as", "the"] + noun_phrase(scene.schema, flt)
    head = [("scene", None)] + _filter_steps(flt) + [("unique", None), (f"same_{g}", None)]
    if want is None:
        return ["how", "many", "other", "things", "have", "the", "same", g] + np_words, head + [("count", None)]
    return ["is", "there", "another", "thing", "with", "the", "same", g] + np_words, head + [("exist", None)]


def _t_logical(scene, rng, want):
    sch = scene.schema
    fams = list(sch.family_names)
    fa_fam, fb_fam = [fams[k] for k in rng.choice(len(fams), size=2, replace=False)]
    fa = [(fa_fam, sch.values[fa_fam][int(rng.integers(sch.cardinality(fa_fam)))])]
    fb = [(fb_fam, sch.values[fb_fam][int(rng.integers(sch.cardinality(fb_fam)))])]
    if rng.random() < 0.5:
        op, conj = "intersect", "and"
    else:
        op, conj = "union", "or"
    body = [fa[0][1], conj, fb[0][1]]
    prog = [("scene", None)] + _filter_steps(fa) + [("scene", None)] + _filter_steps(fb) + [(op, None)]
    if want is None:
        return ["how", "many", "things", "are"] + body, prog + [("count", None)]
    return ["are", "there", "things", "that", "are"] + body, prog + [("exist", None)]


_TEMPLATES = {
    "query-chain": (_t_query, False),
    "exist-chain": (_t_exist, True),
    "count-chain": (_t_count, False),
    "relate-chain": (_t_relate, None),
    "compare-integer": (_t_compare_integer, True),
    "compare-attribute": (_t_compare_attribute, True),
    "same-attribute": (_t_same, None),
    "logical-and/or": (_t_logical, None),
}


def generate_question(scene: Scene, template_family: str, rng: np.random.Generator,
                      catalog: FunctionCatalog, retries: int = 20) -> QuestionSample:
    """Instantiate one template on ``scene``.

    Boolean templates first draw a target truth value and retry until the
    oracle agrees (or the retry budget runs out) to keep answers balanced.
    Raises :class:`Resample` when the template is unsatisfiable.
    """
    if template_family not in _TEMPLATES:
        raise ConfigError(f"unknown template family {template_family!r}")
    fn, boolean = _TEMPLATES[template_family]
    if boolean is None:  # count or exist ending, chosen per question
        boolean = bool(rng.random() < 0.5)
    want = bool(rng.random() < 0.5) if boolean else None
    labels = scene.labels()
    last = None
    for _ in range(retries):
        try:
            words, prog = fn(scene, rng, want)
        except Resample:
            continue
        ans = symbolic_execute(prog, labels, catalog, strict=True)
        last = (words, prog, ans)
        if want is None or ans.value == want:
            break
    if last is None:
        raise Resample(f"{template_family} unsatisfiable on scene {scene.id}")
    words, prog, ans = last
    return QuestionSample(scene.id, tuple(words), tuple(prog), ans, ans.type, template_family)


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    PAD = "<pad>"

    def __init__(self, words):
        self.words = tuple(words)
        if not self.words or self.words[0] != self.PAD:
            raise ConfigError("vocabulary must start with the padding token")
        self.index = {w: k for k, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ConfigError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, words) -> list:
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise KeyError(f"word {e.args[0]!r} not in vocabulary") from None

    def decode(self, tokens) -> list:
        return [self.words[t] for t in tokens]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])


_FIXED_WORDS = (
    "what", "is", "the", "there", "a", "how", "many", "are", "thing", "things", "of", "in",
    "more", "fewer", "than", "same", "number", "and", "or", "does", "have", "as", "other",
    "another", "with", "that",
)


def build_vocab(schema: AttributeSchema) -> Vocabulary:
    words = [Vocabulary.PAD]
    extra = list(_FIXED_WORDS) + list(schema.family_names)
    for fam, vals in schema.families:
        extra += list(vals)
        if fam == "shape":
            extra += [_plural(v) for v in vals]
    for r in schema.relations:
        extra += list(RELATION_WORDS[r])
    for w in extra:
        if w not in words:
            words.append(w)
    return Vocabulary(words)
