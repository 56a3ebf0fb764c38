"""The end-to-end model: perception heads + question parser + soft executor."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .catalog import FunctionCatalog
from .data import Batch, Dataset, encode_batch
from .executor import ExecutionResult, answers_match, execute, readout
from .functions import SoftParams
from .memory import MemoryLayout
from .nn import ParamStore, load_tensors, save_tensors
from .parser import QuestionParser, oracle_parser
from .perception import PerceptionHeads, oracle_perception
from .schema import AttributeSchema


@dataclass
class ModelConfig:
    max_objects: int = 10
    d_feat: int = 32
    t_stack: int = 8
    t_steps: int = 7
    d_emb: int = 64
    d_h: int = 64
    hidden: int = 64
    pointer_temperature: float = 0.1
    tau: float = 0.25
    gamma: float = 0.5
    eps: float = 1e-6
    clamp_outputs: bool = False
    random_memory_init: bool = False
    seed: int = 0

    def soft_params(self) -> SoftParams:
        return SoftParams(self.tau, self.gamma, self.eps, self.clamp_outputs)


class SoftVQAModel:
    def __init__(self, config: ModelConfig, schema: AttributeSchema, vocab_size: int):
        self.config = config
        self.schema = schema
        self.catalog = FunctionCatalog.build(schema)
        self.layout = MemoryLayout(config.max_objects, schema)
        self.vocab_size = vocab_size
        rng = np.random.default_rng(config.seed)
        self.store = ParamStore()
        self.vision = PerceptionHeads(self.store, schema, config.d_feat, rng, config.hidden)
        self.text = QuestionParser(self.store, self.catalog, vocab_size, config.t_steps, rng,
                                   config.d_emb, config.d_h, config.hidden)
        self._mem_rng = np.random.default_rng(config.seed + 1) if config.random_memory_init else None

    # -- forward ---------------------------------------------------------------

    def perceive(self, batch: Batch):
        return self.vision(self.store, batch.features, batch.locations, batch.live)

    def parse(self, batch: Batch):
        return self.text(self.store, batch.tokens, batch.token_mask)

    def forward(self, batch: Batch, parsed=None, perception=None, trace: bool = False) -> ExecutionResult:
        parsed = self.parse(batch) if parsed is None else parsed
        perception = self.perceive(batch) if perception is None else perception
        rng = None
        if self._mem_rng is not None:
            rng = np.random.default_rng(self.config.seed + 1)  # identical memory for every call
        res = execute(self.catalog, self.layout, parsed, perception, batch.live, self.config.t_stack,
                      self.config.soft_params(), self.config.pointer_temperature, trace, rng)
        res.parsed, res.perception = parsed, perception
        return res

    def predict(self, batch: Batch, oracle_program: bool = False, oracle_vision: bool = False) -> list:
        with ad.no_grad():
            parsed = oracle_parser([q.program for q in batch.samples], self.catalog,
                                   self.config.t_steps) if oracle_program else None
            perc = oracle_perception(batch.scenes, self.schema, self.config.max_objects) if oracle_vision else None
            res = self.forward(batch, parsed, perc)
        return readout(res.row.data, res.qtype.data, self.layout)

    def encode(self, dataset: Dataset, samples) -> Batch:
        return encode_batch(samples, [dataset.scene_of(q) for q in samples], dataset.vocab,
                            self.config.max_objects, self.config.d_feat)

    # -- evaluation -------------------------------------------------------------

    def evaluate(self, dataset: Dataset, samples=None, batch_size: int = 256, oracle_program: bool = False,
                 oracle_vision: bool = False) -> dict:
        samples = dataset.val if samples is None else samples
        return evaluate_predictions(samples, lambda chunk: self.predict(
            self.encode(dataset, chunk), oracle_program, oracle_vision), batch_size)

    # -- checkpoints --------------------------------------------------------------

    def save(self, path) -> None:
        save_tensors(path, self.store.state())

    def load(self, path) -> None:
        self.store.load_state(load_tensors(path))

    def manifest(self) -> dict:
        return {"model": asdict(self.config), "catalog_digest": self.catalog.digest(),
                "vocab_size": self.vocab_size, "num_parameters": self.store.num_scalars()}


def evaluate_predictions(samples, predict, batch_size: int = 256) -> dict:
    """Exact-match accuracy overall and per question type.

    ``predict`` maps a list of samples to a list of answers.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    hits = []
    per = defaultdict(list)
    for k in range(0, len(samples), batch_size):
        chunk = samples[k:k + batch_size]
        for q, a in zip(chunk, predict(chunk)):
            ok = answers_match(a, q.answer)
            hits.append(ok)
            per[q.question_type].append(ok)
    out = {"accuracy": float(np.mean(hits)), "n": len(hits)}
    out["per_type"] = {t: float(np.mean(v)) for t, v in sorted(per.items())}
    return out
