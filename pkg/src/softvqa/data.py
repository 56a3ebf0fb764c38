"""Datasets: generation, supervision subsets, serialization and batch encoding.

On-disk layout of a dataset directory::

    scenes.jsonl     one scene per line, fields in this order:
                     id, split, objects[{attrs{family: value}, position[x, y],
                     bbox[x, y, w, h], feature[...]}], relations[[i, j, relation], ...]
    questions.jsonl  one question per line, fields in this order:
                     scene_id, split, template, text, tokens, program[[function, argument|null]],
                     answer{type, value}, question_type, qa, sup
    vocab.txt        one word per line; line k is token index k, line 0 is <pad>
    dataset.json     generation config, catalog digest and counts

``relations`` lists the true (i, j, r) triples: object j is in relation r to reference i.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .catalog import FunctionCatalog
from .scene import (
    TEMPLATE_FAMILIES,
    ConfigError,
    ObjectRecord,
    QuestionSample,
    Resample,
    Scene,
    SceneConfig,
    Vocabulary,
    build_vocab,
    generate_question,
    generate_scene,
)
from .schema import AttributeSchema
from .symbolic import Answer


@dataclass
class DatasetConfig:
    num_scenes: int = 1000
    questions_per_scene: int = 5
    val_fraction: float = 0.2
    qa_percent: float = 100.0
    sup_percent: float = 1.0
    seed: int = 0
    templates: tuple = TEMPLATE_FAMILIES
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        for name in ("qa_percent", "sup_percent"):
            v = getattr(self, name)
            if not (0 < v <= 100):
                raise ConfigError(f"{name} must lie in (0, 100], got {v}")
        if self.num_scenes < 2 or self.questions_per_scene < 1:
            raise ConfigError("need at least 2 scenes and 1 question per scene")
        if not (0 < self.val_fraction < 1):
            raise ConfigError("val_fraction must lie in (0, 1)")
        for t in self.templates:
            if t not in TEMPLATE_FAMILIES:
                raise ConfigError(f"unknown template family {t!r}")


def subset_size(total: int, percent: float, what: str) -> int:
    k = int(math.floor(total * percent / 100.0 + 1e-9))
    if k < 1:
        raise ConfigError(f"{percent}% of {total} questions yields no {what} samples")
    return k


@dataclass
class Dataset:
    schema: AttributeSchema
    catalog: FunctionCatalog
    vocab: Vocabulary
    scenes: dict  # id -> Scene
    train: list
    val: list
    config: dict = field(default_factory=dict)

    @property
    def qa_train(self) -> list:
        return [q for q in self.train if q.qa]

    @property
    def sup_train(self) -> list:
        return [q for q in self.train if q.sup]

    def scene_of(self, q: QuestionSample) -> Scene:
        return self.scenes[q.scene_id]

    # -- serialization -------------------------------------------------------

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        split_of = {q.scene_id: "train" for q in self.train}
        split_of.update({q.scene_id: "val" for q in self.val})
        with open(out / "scenes.jsonl", "w") as fh:
            for sid in sorted(self.scenes):
                fh.write(json.dumps(_scene_record(self.scenes[sid], split_of.get(sid, "train"))) + "\n")
        with open(out / "questions.jsonl", "w") as fh:
            for split, qs in (("train", self.train), ("val", self.val)):
                for q in qs:
                    fh.write(json.dumps(_question_record(q, split, self.vocab)) + "\n")
        self.vocab.save(out / "vocab.txt")
        meta = dict(self.config)
        meta["catalog_digest"] = self.catalog.digest()
        meta["counts"] = {"scenes": len(self.scenes), "train": len(self.train), "val": len(self.val),
                          "qa": len(self.qa_train), "sup": len(self.sup_train)}
        (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, in_dir, schema: AttributeSchema) -> "Dataset":
        src = Path(in_dir)
        catalog = FunctionCatalog.build(schema)
        meta = json.loads((src / "dataset.json").read_text())
        if meta.get("catalog_digest") != catalog.digest():
            raise ConfigError(f"{src}: catalog digest {meta.get('catalog_digest')} does not match "
                              f"{catalog.digest()}")
        vocab = Vocabulary.load(src / "vocab.txt")
        scenes = {}
        with open(src / "scenes.jsonl") as fh:
            for line in fh:
                s = _scene_from_record(json.loads(line), schema)
                scenes[s.id] = s
        train, val = [], []
        with open(src / "questions.jsonl") as fh:
            for line in fh:
                rec = json.loads(line)
                q = QuestionSample(
                    rec["scene_id"], tuple(vocab.decode(rec["tokens"])),
                    tuple((f, a) for f, a in rec["program"]), Answer.from_json(rec["answer"]),
                    rec["question_type"], rec["template"], rec["qa"], rec["sup"])
                (train if rec["split"] == "train" else val).append(q)
        return cls(schema, catalog, vocab, scenes, train, val, meta)


def _scene_record(s: Scene, split: str) -> dict:
    sch = s.schema
    objs = [{"attrs": {f: sch.values[f][o.attrs[f]] for f in sch.family_names},
             "position": list(o.position), "bbox": list(o.bbox),
             "feature": [float(x) for x in o.feature]} for o in s.objects]
    rels = [[int(i), int(j), sch.relations[r]] for i, j, r in zip(*np.nonzero(s.relations))]
    return {"id": s.id, "split": split, "objects": objs, "relations": rels}


def _scene_from_record(rec: dict, schema: AttributeSchema) -> Scene:
    objs = [ObjectRecord({f: schema.value_index(f, v) for f, v in o["attrs"].items()},
                         tuple(o["position"]), tuple(o["bbox"]), np.array(o["feature"], dtype=float))
            for o in rec["objects"]]
    n = len(objs)
    rel = np.zeros((n, n, len(schema.relations)), dtype=bool)
    for i, j, r in rec["relations"]:
        rel[i, j, schema.relations.index(r)] = True
    return Scene(objs, rel, schema, rec["id"])


def _question_record(q: QuestionSample, split: str, vocab: Vocabulary) -> dict:
    return {"scene_id": q.scene_id, "split": split, "template": q.template, "text": q.text,
            "tokens": vocab.encode(q.words), "program": [[f, a] for f, a in q.program],
            "answer": q.answer.to_json(), "question_type": q.question_type, "qa": q.qa, "sup": q.sup}


def build_dataset(config: DatasetConfig) -> Dataset:
    """Generate scenes and questions, split by scene and mark the QA/supervision subsets."""
    rng = np.random.default_rng(config.seed)
    sc = config.scene
    schema = sc.schema
    catalog = FunctionCatalog.build(schema)
    proj = sc.projection()
    scenes, questions = {}, []
    for sid in range(config.num_scenes):
        scene = generate_scene(sc, rng, sid, proj)
        scenes[sid] = scene
        made = 0
        for _ in range(20 * config.questions_per_scene):
            if made == config.questions_per_scene:
                break
            tpl = config.templates[int(rng.integers(len(config.templates)))]
            try:
                questions.append(generate_question(scene, tpl, rng, catalog))
                made += 1
            except Resample:
                continue
    n_val = max(1, int(round(config.num_scenes * config.val_fraction)))
    val_ids = set(int(i) for i in rng.permutation(config.num_scenes)[:n_val])
    train = [q for q in questions if q.scene_id not in val_ids]
    val = [q for q in questions if q.scene_id in val_ids]
    n_qa = subset_size(len(train), config.qa_percent, "QA")
    n_sup = subset_size(len(train), config.sup_percent, "direct-supervision")
    qa_idx = set(int(i) for i in rng.permutation(len(train))[:n_qa])
    sup_idx = set(int(i) for i in rng.permutation(len(train))[:n_sup])
    for k, q in enumerate(train):
        q.qa = k in qa_idx
        q.sup = k in sup_idx
    for q in val:
        q.qa, q.sup = True, False
    cfg = asdict(config)
    cfg["scene"].pop("schema")
    cfg["templates"] = list(config.templates)
    cfg["schema"] = {"families": [[n, list(v)] for n, v in schema.families], "relations": list(schema.relations)}
    return Dataset(schema, catalog, build_vocab(schema), scenes, train, val, cfg)


# ---------------------------------------------------------------------------
# batch encoding


def pad_program(program, t_steps: int) -> list:
    """Front-pad with ``scene`` steps so the last step is the answer-producing function."""
    program = list(program)
    if len(program) > t_steps:
        raise ConfigError(f"program of length {len(program)} exceeds {t_steps} executor steps")
    return [("scene", None)] * (t_steps - len(program)) + program


@dataclass
class Batch:
    tokens: np.ndarray  # int (B, S), <pad>=0
    token_mask: np.ndarray  # bool (B, S)
    features: np.ndarray  # (B, A, d_feat), zero rows for absent objects
    locations: np.ndarray  # (B, A, 4)
    live: np.ndarray  # bool (B, A)
    samples: list
    scenes: list

    @property
    def size(self) -> int:
        return len(self.samples)


def encode_batch(samples, scenes, vocab: Vocabulary, max_objects: int, d_feat: int) -> Batch:
    B = len(samples)
    if B == 0:
        raise ConfigError("empty batch")
    toks = [vocab.encode(q.words) for q in samples]
    S = max(len(t) for t in toks)
    if S == 0 or min(len(t) for t in toks) == 0:
        raise ConfigError("empty token sequence")
    tokens = np.zeros((B, S), dtype=int)
    mask = np.zeros((B, S), dtype=bool)
    feats = np.zeros((B, max_objects, d_feat))
    locs = np.zeros((B, max_objects, 4))
    live = np.zeros((B, max_objects), dtype=bool)
    for b, (t, s) in enumerate(zip(toks, scenes)):
        tokens[b, :len(t)] = t
        mask[b, :len(t)] = True
        if s.n > max_objects:
            raise ConfigError(f"scene {s.id} has {s.n} objects, more than {max_objects}")
        feats[b, :s.n] = s.features()
        locs[b, :s.n] = s.locations()
        live[b, :s.n] = True
    return Batch(tokens, mask, feats, locs, live, list(samples), list(scenes))
