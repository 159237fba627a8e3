import csv
import io
import json
import math

import numpy as np
import pytest

from tapfl.checkpoint import (CheckpointError, decode_entries, load_checkpoint, save_checkpoint)
from tapfl.cli import main
from tapfl.experiment import SynthDatasetSpec, load_config, run_config, synth_dataset
from tapfl.experiment.config import ConfigError
from tapfl.experiment.runner import (RunNotFound, client_average_loss, emit_metrics, final_evals,
                                     read_records)
from tapfl.model import build_server_model

SMALL = {
    "federation.rounds": 2,
    "federation.local_iters": 2,
    "federation.batch_size": 16,
    "federation.warmup_rounds": 1,
    "data.samples_per_client": 24,
    "data.val_samples": 16,
    "tap.post_iters": 2,
}


def small(mode="tap", seed=0, **extra):
    return load_config("desk", mode=mode, seed=seed).with_updates(**{**SMALL, **extra})


# -- data ------------------------------------------------------------------------


def _spec(**kw):
    base = dict(modality="vector-image", task="classification", input_dim=4, num_classes=3,
                samples_per_client=50, val_samples=30, seed=3)
    return SynthDatasetSpec(**{**base, **kw})


@pytest.mark.parametrize("kw", [
    {}, {"task": "reconstruction"},
    {"modality": "token-text", "seq_len": 4, "vocab": 5},
    {"modality": "token-text", "task": "sequence-generation", "seq_len": 4, "vocab": 5},
])
def test_dataset_deterministic(kw):
    a = synth_dataset(_spec(label_skew=0.5, center_shift=0.5, **kw), 3)
    b = synth_dataset(_spec(label_skew=0.5, center_shift=0.5, **kw), 3)
    for (ta, va), (tb, vb) in zip(a, b):
        for x, y in zip(ta + va, tb + vb):
            assert x.tobytes() == y.tobytes()


def test_zero_skew_gives_identical_client_distributions():
    data = synth_dataset(_spec(samples_per_client=6000, label_skew=0.0, center_shift=0.0), 2)
    (x0, y0), _ = data[0]
    (x1, y1), _ = data[1]
    np.testing.assert_allclose(y0.mean(axis=0), y1.mean(axis=0), atol=0.03)
    for c in range(3):
        np.testing.assert_allclose(x0[y0[:, c] == 1].mean(axis=0), x1[y1[:, c] == 1].mean(axis=0),
                                   atol=0.1)


def test_skew_changes_label_mix():
    data = synth_dataset(_spec(samples_per_client=3000, label_skew=1.0), 2)
    assert np.abs(data[0][0][1].mean(axis=0) - data[1][0][1].mean(axis=0)).max() > 0.05


def test_linear_probe_separates_clusters():
    spec = _spec(input_dim=2, num_classes=2, class_centers=((3.0, 0.0), (-3.0, 0.0)),
                 noise=1.0, samples_per_client=400, val_samples=400)
    (x, y), (xv, yv) = synth_dataset(spec, 1)[0]
    # least-squares probe on [x, 1]
    design = np.hstack([x, np.ones((x.shape[0], 1))])
    w, *_ = np.linalg.lstsq(design, y, rcond=None)
    pred = (np.hstack([xv, np.ones((xv.shape[0], 1))]) @ w).argmax(axis=1)
    assert np.mean(pred == yv.argmax(axis=1)) > 0.95


def test_token_targets_are_next_tokens():
    spec = _spec(modality="token-text", task="sequence-generation", seq_len=4, vocab=5)
    (x, y), _ = synth_dataset(spec, 1)[0]
    xs = x.reshape(-1, 4, 5).argmax(axis=2)
    ys = y.reshape(-1, 4, 5).argmax(axis=2)
    np.testing.assert_array_equal(xs[:, 1:], ys[:, :-1])


def test_dataset_spec_validation():
    with pytest.raises(ValueError):
        synth_dataset(_spec(label_skew=1.5), 1)


# -- config ----------------------------------------------------------------------


def test_default_config_values():
    cfg = load_config()
    f = cfg.raw["federation"]
    assert (f["rounds"], f["local_iters"], f["batch_size"]) == (200, 20, 128)
    assert (f["lr_initial"], f["lr_post_warmup"], f["warmup_rounds"], f["weight_decay"]) == \
        (1e-4, 3e-4, 20, 0.01)
    t = cfg.raw["tap"]
    assert (t["kd_temperature"], t["kd_weight"], t["post_iters"]) == (1.0, 2e-3, 50)
    assert t["margins"]["image_classification"] == 0.01
    assert cfg.model_spec().lora_ranks == {"encoder": 8, "mix": 16, "expert": 4}
    assert len(cfg.clients) == 6


def test_config_rejects_unknown_task():
    cfg = load_config()
    raw = dict(cfg.raw)
    raw["clients"] = [{"modalities": ["image"], "tasks": ["nope"]}]
    with pytest.raises(ConfigError):
        type(cfg)(raw)


def test_config_rejects_missing_margin():
    with pytest.raises(ConfigError):
        load_config().with_updates(**{"tap.margins": {}})


def test_margin_override():
    cfg = load_config().with_updates(**{"tap.margin_overrides": {"1/img_cls": 0.5}})
    assert cfg.margin(1, "img_cls") == 0.5
    assert cfg.margin(0, "img_cls") == 0.01


def test_tap_nokd_zero_beta():
    assert load_config(mode="tap-nokd").kd_config().default_beta == 0.0


# -- runs ------------------------------------------------------------------------


def test_records_carry_run_id_seed_round(tmp_path):
    run_id = run_config(small(), tmp_path)
    recs = read_records(run_id, tmp_path)
    assert all({"run_id", "seed", "round"} <= set(r) for r in recs)
    assert {r["type"] for r in recs} >= {"header", "train", "replacement", "counters",
                                         "aggregate", "post", "eval"}


def test_summary_reproducible_and_matches_log(tmp_path):
    cfg = small("fedavg", seed=1)
    a = run_config(cfg, tmp_path / "a")
    b = run_config(cfg, tmp_path / "b")
    text = (tmp_path / "a" / a / "summary.csv").read_text()
    assert text == (tmp_path / "b" / b / "summary.csv").read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    evals = final_evals(read_records(a, tmp_path / "a"))
    for task in {r["task"] for r in evals}:
        hand = np.mean([r["metric"] for r in evals if r["task"] == task])
        mean_row = next(r for r in rows if r["client"] == "mean" and r["task"] == task)
        assert float(mean_row["metric"]) == pytest.approx(hand, abs=1e-9)
    assert any(r["client"] == "avg_classification" for r in rows)


def test_single_client_std_zero(tmp_path):
    cfg = small("local", **{"clients": [{"modalities": ["image"], "tasks": ["img_cls"]}],
                            "federation.clients_per_round": 1})
    run_id = run_config(cfg, tmp_path)
    rows = list(csv.DictReader(open(tmp_path / run_id / "summary.csv")))
    std = next(r for r in rows if r["client"] == "std")
    assert float(std["metric"]) == 0.0 and float(std["val_loss"]) == 0.0


def test_local_zero_rounds_evaluates_initial_model(tmp_path):
    run_id = run_config(small("local", **{"federation.rounds": 0, "tap.post_iters": 0}), tmp_path)
    recs = read_records(run_id, tmp_path)
    assert {r["type"] for r in recs} == {"header", "eval"}
    assert {r["round"] for r in recs if r["type"] == "eval"} == {0}


def test_tap_nesting_matches_local(tmp_path):
    inf = {k: math.inf for k in ("image_classification", "image_generation",
                                 "text_classification", "text_generation")}
    tap = small("tap", **{"tap.margins": inf, "tap.kd_weight": 0.0, "tap.post_iters": 0})
    loc = small("local", **{"tap.post_iters": 0})
    rt = read_records(run_config(tap, tmp_path), tmp_path)
    rl = read_records(run_config(loc, tmp_path), tmp_path)
    assert not any(r["fired"] for r in rt if r["type"] == "replacement")
    personal = client_average_loss(rt, role="personal")
    assert personal == client_average_loss(rl, role="local")


def test_fedavg_post_adds_exactly_p_steps(tmp_path):
    fed = read_records(run_config(small("fedavg"), tmp_path), tmp_path)
    post = read_records(run_config(small("fedavg-post"), tmp_path), tmp_path)
    strip = lambda rs: [(r["round"], r["client"], r["task"], r["loss"])
                        for r in rs if r["type"] == "train"]
    assert strip(fed) == strip(post)
    extra = [r for r in post if r["type"] == "post"]
    assert extra and all(r["steps"] == SMALL["tap.post_iters"] for r in extra)
    assert not any(r["type"] == "post" for r in fed)


def test_replacement_counters_monotone(tmp_path):
    cfg = small("tap", **{"tap.margin_overrides": {f"{c}/{o}": -1e9 for c in range(6)
                                                    for o in ("img_cls", "img_rec", "txt_cls",
                                                              "txt_gen")},
                          "federation.rounds": 3})
    recs = read_records(run_config(cfg, tmp_path), tmp_path)
    by_client = {}
    for r in recs:
        if r["type"] == "counters":
            by_client.setdefault(r["client"], []).append(r["replacements"])
    assert any(v for seq in by_client.values() for d in seq for v in d.values())
    for seq in by_client.values():
        for a, b in zip(seq, seq[1:]):
            assert all(b[o] >= a[o] for o in a)


def test_missing_run(tmp_path):
    with pytest.raises(RunNotFound):
        emit_metrics("nope", tmp_path)


# -- checkpoint -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    spec = small().model_spec()
    store, partition = build_server_model(spec)
    rng = np.random.default_rng(0)
    for a in store.trainable.values():
        a[...] = rng.normal(size=a.shape)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, store, partition)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(partition.blocks)
    for b, tensors in loaded.items():
        for n, arr in tensors.items():
            assert arr.tobytes() == store.trainable[n].tobytes()
            assert arr.shape == store.trainable[n].shape


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointError):
        list(decode_entries(b"NOTMAGIC" + b"\0" * 8))


# -- CLI ---------------------------------------------------------------------------


def test_cli_run_and_summarize(tmp_path, capsys):
    cfg_path = tmp_path / "c.yaml"
    import yaml
    cfg_path.write_text(yaml.safe_dump(small("fedavg").raw))
    assert main(["run", "--config", str(cfg_path), "--root", str(tmp_path / "runs")]) == 0
    run_id = capsys.readouterr().out.splitlines()[0]
    assert main(["summarize", "--run", run_id, "--root", str(tmp_path / "runs")]) == 0
    assert capsys.readouterr().out.startswith("client,task,kind")
    assert main(["summarize", "--run", "missing", "--root", str(tmp_path)]) == 2


def test_cli_bound(tmp_path):
    cfg_path = tmp_path / "b.yaml"
    cfg_path.write_text("bound: {R: [1, 2], sigma: [0.1], zeta: [1.0], tau: [1], T: 100, "
                        "trials: 4}\n")
    assert main(["bound", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "bound_report.json").read_text())
    assert report["all_hold"] and report["rhs_increases_with_R"]
    lines = (tmp_path / "o" / "bound_curves.csv").read_text().splitlines()
    assert lines[0].startswith("R,sigma,zeta,tau,T,lhs_mean")
    assert len(lines) == 1 + 2 * 10
