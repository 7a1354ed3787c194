"""Training loop: files, determinism, resume, ablation plumbing."""
import csv
import json
import shutil

import numpy as np
import pytest

from refalign.config import RunConfig, W_SWEEP_GRID
from refalign.data import CorpusConfig, generate_corpus
from refalign.encoders import EncoderConfig
from refalign.model import model_for_corpus, read_checkpoint
from refalign.train import (METRIC_COLUMNS, ablate, format_ablation_table,
                            masked_eval, train, write_ablation_report)

_CC = CorpusConfig(n_train_identities=12, n_test_identities=6,
                   pairs_per_identity=2, n_slots=3, values_per_slot=5,
                   background_dims=4, seed=2)


def _cfg(tmp_path, **kw):
    base = dict(corpus=_CC,
                encoder=EncoderConfig(d=16, n_heads=4,
                                      image_input_dim=_CC.image_dim),
                epochs=3, warmup_epochs=1, batch_identities=4, batch_pairs=2,
                eval_every=0, run_id="t", out_dir=str(tmp_path / "runs"))
    base.update(kw)
    return RunConfig(**base)


def test_train_writes_metrics_and_checkpoint(tmp_path):
    cfg = _cfg(tmp_path).with_variant("Full")
    res = train(cfg)
    assert res.steps == 3 * 3
    step, meta, arrays = read_checkpoint(res.checkpoint_path)
    assert step == 9
    assert meta["run_seed"] == 0 and meta["run_id"] == cfg.run_id
    assert meta["config"]["epochs"] == 3
    assert "reference.bank" in arrays and "adam.t" in arrays

    rows = [json.loads(line) for line in open(res.metrics_jsonl)]
    assert [set(r) for r in rows] == [set(METRIC_COLUMNS)] * 4
    # refinement doubles the (t2i, i2t) row pair
    assert sorted((r["direction"], r["refined"]) for r in rows) == \
        [("i2t", False), ("i2t", True), ("t2i", False), ("t2i", True)]
    assert res.final_metrics == rows

    with open(res.metrics_csv, newline="") as f:
        table = list(csv.DictReader(f))
    assert len(table) == 4
    assert tuple(table[0]) == METRIC_COLUMNS


def test_eval_cadence(tmp_path):
    res = train(_cfg(tmp_path, epochs=4, eval_every=2, run_id="cad"))
    rows = [json.loads(line) for line in open(res.metrics_jsonl)]
    # epochs 2 and 4, two directions each, unrefined only
    assert [r["step"] for r in rows] == [6, 6, 12, 12]
    assert all(not r["refined"] for r in rows)


def test_training_is_bit_deterministic(tmp_path):
    cfg = _cfg(tmp_path, run_id="det").with_variant("Full")
    first = train(cfg)
    ckpt = open(first.checkpoint_path, "rb").read()
    jsonl = open(first.metrics_jsonl).read()
    shutil.rmtree(cfg.out_dir)
    second = train(cfg)
    assert open(second.checkpoint_path, "rb").read() == ckpt
    assert open(second.metrics_jsonl).read() == jsonl


def test_stop_and_resume_matches_straight_run(tmp_path):
    straight = _cfg(tmp_path, run_id="straight").with_variant("C")
    broken = _cfg(tmp_path, run_id="resumed",
                  out_dir=str(tmp_path / "part")).with_variant("C")
    full = train(straight)
    part = train(broken, stop_after_epochs=1)
    assert part.steps == 3
    resumed = train(broken, resume_from=part.checkpoint_path)
    assert resumed.steps == full.steps
    _, _, want = read_checkpoint(full.checkpoint_path)
    _, _, got = read_checkpoint(resumed.checkpoint_path)
    for name in want:
        np.testing.assert_array_equal(want[name], got[name])


def test_resume_validation(tmp_path):
    cfg = _cfg(tmp_path, run_id="guard").with_variant("C")
    part = train(cfg, stop_after_epochs=1)
    with pytest.raises(ValueError, match="seed"):
        train(cfg.with_seed(1), resume_from=part.checkpoint_path)

    from refalign.model import save_checkpoint
    from refalign.tensor import Adam
    corpus = generate_corpus(cfg.corpus)
    model = model_for_corpus(cfg.encoder, corpus, cfg.seed)
    odd = str(tmp_path / "odd.ckpt")
    save_checkpoint(odd, model.named_parameters(), step=4,
                    meta={"run_seed": 0}, optimizer=Adam(model.parameters()))
    with pytest.raises(ValueError, match="boundary"):
        train(cfg, resume_from=odd)


def test_train_rejects_foreign_corpus(tmp_path):
    other = generate_corpus(CorpusConfig(n_train_identities=12,
                                         n_test_identities=6,
                                         pairs_per_identity=2, seed=9))
    with pytest.raises(ValueError, match="corpus does not match"):
        train(_cfg(tmp_path), corpus=other)


def test_baseline_never_touches_the_bank(tmp_path):
    cfg = _cfg(tmp_path, run_id="bank")
    res = train(cfg.with_variant("Baseline"))
    fresh = model_for_corpus(cfg.encoder, res.corpus, cfg.seed)
    np.testing.assert_array_equal(res.model.bank.ref.data,
                                  fresh.bank.ref.data)
    moved = train(cfg.with_variant("C"), corpus=res.corpus)
    assert moved.model.bank.ref.data.tobytes() != fresh.bank.ref.data.tobytes()


def test_masked_eval_contract(tmp_path):
    corpus = generate_corpus(_CC)
    cfg = _cfg(tmp_path)
    model = model_for_corpus(cfg.encoder, corpus, seed=0)
    out = masked_eval(model, corpus, split="train", ratio=0.5, seed=0)
    assert set(out) == {"accuracy", "perplexity", "positions"}
    assert 0.0 <= out["accuracy"] <= 1.0
    assert out["perplexity"] > 1.0
    assert out["positions"] > 0
    again = masked_eval(model, corpus, split="train", ratio=0.5, seed=0)
    assert out == again

    empty_tests = generate_corpus(CorpusConfig(
        n_train_identities=2, n_test_identities=1, pairs_per_identity=1,
        n_slots=3, values_per_slot=5, background_dims=4, p_drop=1.0))
    blind = model_for_corpus(EncoderConfig(
        d=16, n_heads=4, image_input_dim=empty_tests.config.image_dim),
        empty_tests, seed=0)
    with pytest.raises(ValueError, match="no maskable"):
        masked_eval(blind, empty_tests, split="train")


def test_ablation_report_structure(tmp_path):
    cfg = _cfg(tmp_path, run_id="abl")
    report = ablate(cfg, seeds=(0,))
    assert report["seeds"] == [0]
    assert report["runs_aggregated"] == 1 * (5 + len(W_SWEEP_GRID))
    assert [v["variant"] for v in report["variants"]] == \
        ["Baseline", "A", "B", "C", "Full"]
    assert [s["w"] for s in report["sweep"]] == list(W_SWEEP_GRID)
    for entry in report["variants"] + report["sweep"]:
        assert set(entry["mean"]) == {"R@1", "R@5", "R@10", "mAP", "AP@N"}
        assert len(entry["per_seed"]) == 1
        assert all(s == 0.0 for s in entry["std"].values())  # single seed

    # at w=0 the sweep re-scores C's model without moving anything
    c = next(v for v in report["variants"] if v["variant"] == "C")
    w0 = next(s for s in report["sweep"] if s["w"] == 0.0)
    assert w0["per_seed"][0] == c["per_seed"][0]

    json_path, csv_path = write_ablation_report(report, str(tmp_path / "rep"))
    assert json.load(open(json_path))["seeds"] == [0]
    with open(csv_path, newline="") as f:
        lines = list(csv.reader(f))
    assert len(lines) == 1 + 5 + len(W_SWEEP_GRID)

    table = format_ablation_table(report)
    assert "Baseline" in table and "Full" in table and "0.9" in table
