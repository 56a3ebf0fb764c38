"""Soft execution with one-hot parser and perception reproduces symbolic answers.

Prints a few questions with their soft and symbolic answers, then the
per-step function weights and stack pointer of the first question.

    python3 demos/oracle_reduction.py
"""

import numpy as np

from softvqa import autodiff as ad
from softvqa.catalog import FunctionCatalog
from softvqa.data import DatasetConfig, build_dataset, encode_batch
from softvqa.executor import execute, readout
from softvqa.functions import SoftParams
from softvqa.memory import MemoryLayout
from softvqa.parser import oracle_parser
from softvqa.perception import oracle_perception
from softvqa.symbolic import symbolic_execute

ds = build_dataset(DatasetConfig(num_scenes=100, questions_per_scene=3, seed=0))
catalog = FunctionCatalog.build(ds.schema)
layout = MemoryLayout(10, ds.schema)
qs = ds.val[:6]
scenes = [ds.scene_of(q) for q in qs]
batch = encode_batch(qs, scenes, ds.vocab, 10, 32)
parsed = oracle_parser([q.program for q in qs], catalog, 7)
with ad.no_grad():
    res = execute(catalog, layout, parsed, oracle_perception(scenes, ds.schema, 10), batch.live, 8, SoftParams(),
                  trace=True)
for q, s, soft in zip(qs, scenes, readout(res.row.data, res.qtype.data, layout)):
    truth = symbolic_execute(q.program, s.labels(), catalog)
    print(f"{q.text:<66} soft={soft.value!s:<6} symbolic={truth.value}")

print("\nstep  function               pointer")
for rec in res.trace.steps:
    print(f"{rec['step']:>4}  {catalog[int(np.argmax(rec['w'][0]))].name:<22} {np.round(rec['p'][0], 2)}")
