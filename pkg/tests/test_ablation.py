import json
from dataclasses import replace

import numpy as np
import pytest

from semaug.ablation import (COMPONENT_ROWS, PRESETS, STRATEGY_ROWS, TOGGLES, AblationReport, AblationRow,
                             parse_grid, run_ablation)
from semaug.augment import OptConfig
from semaug.errors import ConfigError
from semaug.training import TOY_PROFILE

TINY = replace(TOY_PROFILE, iterations=2, batch_size=2, warmup_iters=1, lr_decay_at=2)
TINY_OPT = OptConfig(iterations=2)


def test_presets_cover_strategies_and_components():
    assert [r.aug for r in STRATEGY_ROWS] == ["none", "random", "off_concept", "sem"]
    assert COMPONENT_ROWS[0] == AblationRow("baseline", "random", "linear", "average", "none")
    assert COMPONENT_ROWS[-1].aug == "sem"
    # each component row flips exactly one toggle relative to its predecessor
    for prev, cur in zip(COMPONENT_ROWS, COMPONENT_ROWS[1:]):
        assert sum(getattr(prev, k) != getattr(cur, k) for k in TOGGLES) == 1
    for name, rows in PRESETS.items():
        assert parse_grid(name) == list(rows)
        assert parse_grid({"preset": name}) == list(rows)


def test_parse_grid_rows_and_defaults():
    rows = parse_grid([{"name": "a", "aug": "none"}, {"pooling": "average"}])
    assert rows[0] == AblationRow("a", aug="none")
    assert rows[1].name == "pretrained/text/average/sem"
    assert parse_grid({"rows": [{"name": "x"}]}) == [AblationRow("x")]


@pytest.mark.parametrize("spec", ["nope", [], {"rows": []}, 3, [{"name": "a"}, {"name": "a"}],
                                  [{"aug": "magic"}], [{"colour": "red"}]])
def test_parse_grid_rejects(spec):
    with pytest.raises(ConfigError):
        parse_grid(spec)


def test_unknown_toggle_names_known_ones():
    with pytest.raises(ConfigError, match="init"):
        AblationRow.from_json({"colour": "red"})


def test_report_markdown_and_save(tmp_path):
    rows = [{"name": "a", "toggles": {}, "per_seed": {}, "median": {"fog": 0.25, "night": 0.5}},
            {"name": "b", "toggles": {}, "per_seed": {}, "median": {"fog": 0.125}}]
    rep = AblationReport(rows, [0], ["fog", "night"])
    md = rep.to_markdown()
    assert md.splitlines()[0] == "| Method | fog | night |"
    assert "| a | 25.0 | 50.0 |" in md and "| b | 12.5 | - |" in md
    rep.save(tmp_path / "r.json", tmp_path / "r.md")
    assert json.loads((tmp_path / "r.json").read_text())["rows"] == rows
    assert (tmp_path / "r.md").read_text() == md


def test_run_ablation_tiny(random_bundle, clear_small, domains_small):
    evals = {d: domains_small[d] for d in ("clear", "fog")}
    seen = []
    grid = [{"name": "none", "aug": "none"}, {"name": "rand", "aug": "random", "pooling": "average"},
            {"name": "rinit", "init": "random", "aug": "none"}]
    rep = run_ablation(grid, clear_small, evals, random_bundle, seeds=[0, 1], train_cfg=TINY,
                       opt_cfg=TINY_OPT, progress=seen.append)
    assert [r["name"] for r in rep.rows] == ["none", "rand", "rinit"]
    assert len(seen) == 6
    for row in rep.rows:
        assert set(row["per_seed"]) == {"0", "1"}
        for d in evals:
            vals = [row["per_seed"][s][d] for s in ("0", "1")]
            assert row["median"][d] == pytest.approx(float(np.median(vals)))
            assert 0.0 <= row["median"][d] <= 1.0
    assert rep.meta["n_train"] == len(clear_small)
    with pytest.raises(ConfigError):
        run_ablation(grid, clear_small, evals, random_bundle, seeds=[], train_cfg=TINY)
    with pytest.raises(ConfigError):
        run_ablation(grid, clear_small, {}, random_bundle, seeds=[0], train_cfg=TINY)
