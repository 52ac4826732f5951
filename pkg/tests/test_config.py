from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from artifact.config import (ConfigError, dump_config, load_config, parse_config, parse_size)
from artifact.indexer import BuildConfig
from artifact.streams import EXPERIMENT_SETS


@pytest.mark.parametrize("text,value", [("32K", 32768), ("32 KiB", 32768), ("1g", 1 << 30),
                                        ("7", 7), ("2MB", 2 << 20), ("0", 0)])
def test_sizes(text, value):
    assert parse_size(text) == value


@pytest.mark.parametrize("bad", ["", "K", "1.5M", "-3", "12Q"])
def test_bad_sizes(bad):
    with pytest.raises(ConfigError):
        parse_size(bad)


def test_documented_example():
    cfg = parse_config("""
        # comment
        cluster_size       = 32K
        cache.per_stream   = 45
        cache.total        = 1G
        ds.small_threshold = 32K
        chain.limit        = 9
        phases.known_groups   = 243
        phases.unknown_groups = 96
        strategies         = C1,EM,PART,S,FL,TAG,CH,SR
    """)
    e = cfg.engine
    assert e.store.cluster_size == 32768 and e.cache.total_bytes == 1 << 30
    assert e.cache.per_stream == 45 and e.strategies.chain_limit == 9
    assert (cfg.known_groups, cfg.unknown_groups) == (243, 96)
    assert e.strategies.enabled == frozenset(EXPERIMENT_SETS[2])


def test_experiment_and_ds_switch():
    cfg = parse_config("experiment = 2\nds.enabled = yes\n")
    assert cfg.engine.strategies.enabled == frozenset(EXPERIMENT_SETS[3])
    cfg = parse_config("experiment = 3\nds.enabled = off\n")
    assert cfg.engine.strategies.enabled == frozenset(EXPERIMENT_SETS[2])


@pytest.mark.parametrize("text", [
    "strategies = CH", "strategies = SR,EM", "bogus = 1", "just words", "experiment = 4",
    "cluster_size = 1K", "chain.limit = 0", "chain.limit_jitter = 5..2", "max_distance = 0",
    "reread_source = maybe", "strategies = C1,XX",
])
def test_invalid_settings(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_error_mentions_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("cluster_size = 4K\nnope = 1\n")


def test_missing_file(tmp_path):
    assert load_config(None) == BuildConfig()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.conf")


@given(st.sampled_from(sorted(EXPERIMENT_SETS)), st.sampled_from([4096, 8192, 32768]),
       st.integers(1, 12), st.one_of(st.none(), st.integers(1, 500)),
       st.one_of(st.none(), st.tuples(st.integers(1, 4), st.integers(4, 9))),
       st.sampled_from([(2, 4, 8, 16), (2, 8)]), st.booleans())
def test_dump_round_trip(number, cs, limit, groups, jitter, divs, reread):
    cfg = parse_config(f"experiment = {number}\ncluster_size = {cs}\nchain.limit = {limit}\n"
                       f"phases.known_groups = {groups or 'auto'}\n"
                       f"chain.limit_jitter = {'%d..%d' % jitter if jitter else 'none'}\n"
                       f"part_divisions = {','.join(map(str, divs))}\n"
                       f"reread_source = {reread}\n")
    assert parse_config(dump_config(cfg)) == cfg
