import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from episeg.adapt import TtaConfig, apply_head, init_head
from episeg.attention_prior import PgrConfig
from episeg.calibration import PacConfig
from episeg.config import RunConfig, load_run_config, run_config_from_dict
from episeg.numerics import binarize, sigmoid
from episeg.pipeline import (
    dump_layer_heatmaps,
    iter_episodes,
    resolve_gate_policy,
    run_benchmark,
    run_episode,
    selectors_compare,
)
from episeg.routing import HlsConfig, route
from episeg.self_support import SspConfig
from episeg.store import write_dump
from episeg.synthetic import SyntheticSpec, gen_synthetic


def _cfg(tmp_path, **overrides):
    kwargs = dict(
        seed=3,
        shot=3,
        out_dir=str(tmp_path / "out"),
        synthetic=SyntheticSpec(hg=8, wg=8, d=12, layers=6, planted_layer=3, margin=3.0,
                                noise=1.0, episodes=4, attn_layers=[3, 5]),
        hls=HlsConfig(candidates=list(range(6)), anchor_layer=5),
    )
    kwargs.update(overrides)
    return RunConfig(**kwargs)


def test_run_episode_end_to_end(tmp_path):
    cfg = _cfg(tmp_path)
    _, episode = next(iter_episodes(cfg))
    res = run_episode(episode, cfg, 0)
    assert res.pred_mask.shape == episode.query.grid
    assert res.iou is not None and 0.0 <= res.iou <= 1.0
    assert res.gate_policy == "auto" and res.decision.kind in ("single", "fusion")
    assert set(res.timings) == {"route", "adapt", "predict"}


def test_missing_query_gt_gives_no_iou(tmp_path):
    cfg = _cfg(tmp_path)
    _, episode = next(iter_episodes(cfg))
    episode.query.mask = None
    res = run_episode(episode, cfg, 0)
    assert res.iou is None
    assert res.pred_mask is not None


def test_ablation_identity_matches_base_head(tmp_path):
    # everything off: the pipeline must reduce to the base predictor at the
    # routed representation, bit for bit
    cfg = _cfg(
        tmp_path,
        tta=TtaConfig(variant="m0"),
        pgr=PgrConfig(enabled=False),
        pac=PacConfig(gate_policy="off"),
    )
    _, episode = next(iter_episodes(cfg))
    res = run_episode(episode, cfg, 0)

    from episeg.self_support import predict, support_prototypes

    decision = route(episode, cfg.hls, cfg.ssp)
    feats = [decision.features(s) for s in episode.supports]
    masks = [s.flat_mask() for s in episode.supports]
    p_fg, p_bg = support_prototypes(feats, masks)
    base = predict(decision.features(episode.query), p_fg, p_bg, cfg.ssp)
    want = binarize(sigmoid(base.base_logit)).reshape(episode.query.grid)
    assert res.pred_mask.tobytes() == want.tobytes()


def test_gate_disabled_equals_impossible_threshold(tmp_path):
    # an auto gate that can never fire must reproduce the gate-off pipeline
    cfg_off = _cfg(tmp_path, pac=PacConfig(gate_policy="off"))
    cfg_auto = _cfg(tmp_path, pac=PacConfig(gate_policy="auto", gate_votes=99))
    for index in range(2):
        ep_off = dict(iter_episodes(cfg_off))[index]
        ep_auto = dict(iter_episodes(cfg_auto))[index]
        a = run_episode(ep_off, cfg_off, index)
        b = run_episode(ep_auto, cfg_auto, index)
        assert a.pred_mask.tobytes() == b.pred_mask.tobytes()
        assert a.iou == b.iou


def test_one_shot_path(tmp_path):
    cfg = _cfg(tmp_path, shot=1)
    _, episode = next(iter_episodes(cfg))
    assert episode.shot == 1
    res = run_episode(episode, cfg, 0)
    assert res.gate_policy == "always_on"
    assert res.gate_applied


def test_resolve_gate_policy():
    base = RunConfig(synthetic=SyntheticSpec())
    assert resolve_gate_policy(base, 1).gate_policy == "always_on"
    five = resolve_gate_policy(base, 5)
    assert five.gate_policy == "auto" and five.gate_votes == 2
    seven = resolve_gate_policy(base, 7)
    assert seven.gate_votes == 3
    explicit = RunConfig(synthetic=SyntheticSpec(), pac=PacConfig(gate_policy="off"))
    assert resolve_gate_policy(explicit, 5).gate_policy == "off"


def test_run_benchmark_outputs(tmp_path):
    cfg = _cfg(tmp_path)
    summary = run_benchmark(cfg)
    assert summary["episodes"] == 4
    assert summary["mean_iou"] is not None

    with open(f"{cfg.out_dir}/episodes.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    ious = [float(r["iou"]) for r in rows]
    assert summary["mean_iou"] == pytest.approx(np.mean(ious), abs=1e-12)

    with open(f"{cfg.out_dir}/summary.json") as fh:
        loaded = json.load(fh)
    assert loaded["mean_iou"] == summary["mean_iou"]


def test_run_benchmark_zero_episodes(tmp_path):
    cfg = _cfg(tmp_path, synthetic=SyntheticSpec(episodes=0))
    with pytest.raises(ValueError):
        run_benchmark(cfg)


def test_benchmark_determinism(tmp_path):
    cfg_a = _cfg(tmp_path, out_dir=str(tmp_path / "a"))
    cfg_b = _cfg(tmp_path, out_dir=str(tmp_path / "b"))
    run_benchmark(cfg_a)
    run_benchmark(cfg_b)
    for name in ("episodes.csv",):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    sa = json.loads((tmp_path / "a" / "summary.json").read_text())
    sb = json.loads((tmp_path / "b" / "summary.json").read_text())
    sa["config"].pop("out_dir")
    sb["config"].pop("out_dir")
    assert sa == sb


def test_identical_episodes_zero_variance(tmp_path, rng):
    episodes = gen_synthetic(
        SyntheticSpec(hg=8, wg=8, d=12, layers=6, planted_layer=3, episodes=1, attn_layers=[3, 5]),
        shot=3,
        seed=4,
    )
    paths = []
    base = tmp_path / "dumps"
    base.mkdir()
    ep = episodes[0]
    for j, dump in enumerate(ep.supports):
        write_dump(dump, base / f"s{j}.hfd")
    write_dump(ep.query, base / "q.hfd")
    manifest = base / "ep.json"
    manifest.write_text(
        json.dumps({"supports": [f"s{j}.hfd" for j in range(3)], "query": "q.hfd", "class_id": "c"})
    )
    cfg = _cfg(tmp_path, manifests=[str(manifest)] * 3, synthetic=None)
    summary = run_benchmark(cfg)
    with open(f"{cfg.out_dir}/episodes.csv", newline="") as fh:
        ious = [float(r["iou"]) for r in csv.DictReader(fh)]
    assert len(set(ious)) == 1
    assert summary["mean_iou"] == pytest.approx(ious[0])


def test_selectors_compare_rows(tmp_path):
    cfg = _cfg(tmp_path, compare_selectors=True)
    rows = selectors_compare(cfg)
    assert len(rows) == 4 * 4
    by_selector = {}
    for row in rows:
        by_selector.setdefault(row["selector"], []).append(float(row["regret"]))
    assert set(by_selector) == {"hls", "static_max", "grad_max", "grad_delta_max"}
    assert all(r == 0.0 for r in by_selector["hls"])  # argmin has zero regret
    assert all(r >= 0.0 for rs in by_selector.values() for r in rs)


def test_selector_driven_pipeline(tmp_path):
    cfg = _cfg(tmp_path, selector="static_max")
    _, episode = next(iter_episodes(cfg))
    res = run_episode(episode, cfg, 0)
    assert res.decision.kind == "single"
    assert res.decision.layers[0] in cfg.hls.candidates


def test_heatmaps(tmp_path):
    cfg = _cfg(tmp_path)
    _, episode = next(iter_episodes(cfg))
    out = tmp_path / "maps"
    files = dump_layer_heatmaps(episode, out, cfg.ssp)
    pgms = sorted(out.glob("*.pgm"))
    assert len(pgms) == episode.query.n_layers
    assert len(files) == 2 * episode.query.n_layers
    header = pgms[0].read_bytes()[:20]
    assert header.startswith(b"P5\n8 8\n255\n")
    again = tmp_path / "maps2"
    dump_layer_heatmaps(episode, again, cfg.ssp)
    for a, b in zip(pgms, sorted(again.glob("*.pgm"))):
        assert a.read_bytes() == b.read_bytes()


def test_config_json_round_trip(tmp_path):
    cfg = _cfg(tmp_path)
    blob = {
        "seed": 3,
        "shot": 3,
        "out_dir": cfg.out_dir,
        "synthetic": {"hg": 8, "wg": 8, "d": 12, "layers": 6, "planted_layer": 3,
                      "episodes": 2, "attn_layers": [3, 5]},
        "hls": {"candidates": list(range(6)), "anchor_layer": 5},
        "pac": {"gate_policy": "always_on"},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(blob))
    loaded = load_run_config(path)
    assert loaded.synthetic.episodes == 2
    assert loaded.pac.gate_policy == "always_on"
    with pytest.raises(ValueError):
        run_config_from_dict({"synthetic": {}, "bogus_key": 1})
    with pytest.raises(ValueError):
        run_config_from_dict({"synthetic": {"bogus": 2}})
    with pytest.raises(ValueError):
        run_config_from_dict({})  # neither manifests nor synthetic
