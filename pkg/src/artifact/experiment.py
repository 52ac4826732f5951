"""Strategy-set comparison: the same collection, indexed part by part, once per set."""
from __future__ import annotations

import logging
import shutil
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from .corpus import CorpusSpec, generate_documents
from .engine import EngineConfig
from .indexer import BuildConfig, IndexSet, LedgerTable, split_evenly
from .io_layer import IoLedger
from .phase_cache import CacheConfig
from .streams import EXPERIMENT_SETS
from .textpipe import Lexicon

log = logging.getLogger(__name__)


REFERENCE_CORPUS = CorpusSpec(total_bytes=100 << 20, seed=1)
REFERENCE_PARTS = 2


def reference_config() -> BuildConfig:
    """Settings of the 100 MB comparison: library defaults with a 64 MiB cluster cache."""
    return BuildConfig(engine=EngineConfig(cache=CacheConfig(per_stream=45, total_bytes=64 << 20)))


def generated_parts(spec: CorpusSpec, parts: int,
                    lexicon: Optional[Lexicon] = None) -> list[list[tuple[str, str]]]:
    """A synthetic corpus split into ``parts`` consecutive pieces of about equal size."""
    texts = [(f"gen/{i:07d}", t) for i, t in enumerate(generate_documents(spec, lexicon))]
    return split_evenly(texts, parts)


@dataclass
class ExperimentResult:
    table: LedgerTable
    seconds: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)

    def label(self, number: int) -> str:
        return f"set {number}"


def config_for_set(base: BuildConfig, number: int) -> BuildConfig:
    s = base.engine.strategies
    strategies = replace(s, enabled=frozenset(EXPERIMENT_SETS[number]))
    return replace(base, engine=replace(base.engine, strategies=strategies))


def run_experiment(parts: Sequence[Sequence[tuple[str, str]]], out_dir, sets=(1, 2, 3),
                   base: Optional[BuildConfig] = None, lexicon: Optional[Lexicon] = None,
                   verify: bool = False) -> ExperimentResult:
    """Index ``parts`` (lists of (path, text)) in order under each strategy set.

    Every set gets its own index directory ``out_dir/set<N>``.
    """
    base = base or BuildConfig()
    lexicon = lexicon or Lexicon.load()
    out = Path(out_dir)
    columns: dict[str, dict[str, IoLedger]] = {}
    result = ExperimentResult(LedgerTable(columns))
    for number in sets:
        cfg = config_for_set(base, number)
        d = out / f"set{number}"
        if d.exists():
            shutil.rmtree(d)
        t0 = time.perf_counter()
        ix = IndexSet(d, lexicon, cfg)
        for part in parts:
            ix.index_part(ix.documents(part))
        if verify:
            result.verify[number] = ix.verify()
        columns[f"set {number}"] = ix.ledgers()
        result.source[number] = ix.source_ledger.to_dict()
        ix.close()
        result.seconds[number] = time.perf_counter() - t0
        log.info("set %d (%s): %.1fs, %d ops", number, cfg.engine.strategies.label(),
                 result.seconds[number], result.table.total(f"set {number}"))
    return result
