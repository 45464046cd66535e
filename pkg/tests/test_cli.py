import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from pcgnet.cli import main
from pcgnet.data import CycleStore, read_fold_manifest
from pcgnet.fir import bank_from_json, default_bank, frequency_response
from pcgnet.model import NetworkConfig, build, save

from _reference import REFERENCE_ROWS


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One small synth -> ingest -> folds pipeline shared by the tests."""
    root = tmp_path_factory.mktemp("pipe")
    assert main(["synth", "--n", "12", "--abnormal-fraction", "0.5",
                 "--seed", "7", "--out", str(root / "data")]) == 0
    assert main(["ingest", "--wav-dir", str(root / "data" / "wav"),
                 "--labels", str(root / "data" / "labels.csv"),
                 "--subset", "synthetic", "--out", str(root / "store")]) == 0
    assert main(["folds", "--cycles", str(root / "store" / "cycles.bin"),
                 "--seed", "7", "--out", str(root / "folds")]) == 0
    return root


class TestDesign:
    def test_bank_edges_and_files(self, tmp_path):
        assert main(["design", "--bank", "--rate", "1000",
                     "--out", str(tmp_path)]) == 0
        bank = bank_from_json((tmp_path / "bank.json").read_text())
        edges = [(f.band_lo_hz, f.band_hi_hz) for f in bank.filters]
        assert edges == [(25.0, 45.0), (45.0, 80.0), (80.0, 200.0), (200.0, 500.0)]
        assert (tmp_path / "manifest.json").exists()

    def test_single_filter_and_response_regeneration(self, tmp_path):
        out1 = tmp_path / "a"
        assert main(["design", "--lo", "45", "--hi", "80",
                     "--order", "60", "--rate", "1000", "--out", str(out1)]) == 0
        ra = tmp_path / "ra"
        rb = tmp_path / "rb"
        for r in (ra, rb):
            assert main(["response", "--filter", str(out1 / "filter.json"),
                         "--out", str(r)]) == 0
        assert digest(ra / "response.csv") == digest(rb / "response.csv")
        assert digest(ra / "response.csv") == digest(out1 / "response.csv")

    def test_degenerate_order_rejected(self, tmp_path):
        assert main(["design", "--lo", "25", "--hi", "45", "--order", "0",
                     "--rate", "1000", "--out", str(tmp_path)]) == 2


class TestSynthIngestFolds:
    def test_synth_class_counts(self, tmp_path):
        assert main(["synth", "--n", "100", "--abnormal-fraction", "0.21",
                     "--seed", "1", "--out", str(tmp_path)]) == 0
        labels = (tmp_path / "labels.csv").read_text().strip().splitlines()[1:]
        n_abn = sum(1 for line in labels if line.endswith(",1"))
        assert n_abn == 21 and len(labels) == 100

    def test_synth_reproducible(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["synth", "--n", "4", "--seed", "5", "--out", str(out)]) == 0
        for wav in sorted((a / "wav").glob("*.wav")):
            assert digest(wav) == digest(b / "wav" / wav.name)

    def test_pipeline_store_and_folds(self, pipeline):
        store = CycleStore.load(pipeline / "store" / "cycles.bin")
        assert len(store) > 20
        folds = read_fold_manifest(pipeline / "folds" / "folds.csv")
        labels = store.recording_labels()
        for fold in range(4):
            ids = [r for r, f in folds.items() if f == fold]
            assert ids, f"fold {fold} empty"
            n_abn = sum(labels[r] for r in ids)
            assert 2 * n_abn == len(ids)

    def test_folds_rerun_identical(self, pipeline, tmp_path):
        assert main(["folds", "--cycles", str(pipeline / "store" / "cycles.bin"),
                     "--seed", "7", "--out", str(tmp_path)]) == 0
        assert digest(tmp_path / "folds.csv") == digest(pipeline / "folds" / "folds.csv")

    def test_ingest_empty_dir_is_data_error(self, tmp_path):
        (tmp_path / "w").mkdir()
        (tmp_path / "labels.csv").write_text("id,label\nx,1\n")
        assert main(["ingest", "--wav-dir", str(tmp_path / "w"),
                     "--labels", str(tmp_path / "labels.csv"),
                     "--out", str(tmp_path / "o")]) == 3


class TestTrainEval:
    def test_train_eval_round(self, pipeline, tmp_path):
        run = tmp_path / "run"
        assert main(["train", "--cycles", str(pipeline / "store" / "cycles.bin"),
                     "--folds", str(pipeline / "folds" / "folds.csv"),
                     "--fold", "0", "--frontend", "lp", "--init", "fir",
                     "--epochs", "1", "--batch-size", "16", "--seed", "3",
                     "--out", str(run)]) == 0
        assert (run / "checkpoint.ckpt").exists()
        hist = (run / "history.csv").read_text().strip().splitlines()
        assert hist[0] == "epoch,train_loss,val_macc_pct,val_cycle_acc"
        assert len(hist) == 2
        ev = tmp_path / "eval"
        assert main(["eval", "--ckpt", str(run / "checkpoint.ckpt"),
                     "--cycles", str(pipeline / "store" / "cycles.bin"),
                     "--folds", str(pipeline / "folds" / "folds.csv"),
                     "--fold", "0", "--out", str(ev)]) == 0
        with open(ev / "eval.csv", newline="") as fh:
            row = next(csv.DictReader(fh))
        assert row["config"] == "lp-tconv-fir"
        counts = sum(int(row[c]) for c in ("tp", "tn", "fp", "fn"))
        assert counts == 2  # 6+6 recordings: each fold validates 1+1

    def test_invalid_combo_is_usage_error(self, pipeline, tmp_path):
        assert main(["train", "--cycles", str(pipeline / "store" / "cycles.bin"),
                     "--folds", str(pipeline / "folds" / "folds.csv"),
                     "--fold", "0", "--frontend", "baseline", "--init", "zeros",
                     "--epochs", "1", "--out", str(tmp_path)]) == 2

    def test_config_file_overrides_defaults(self, pipeline, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 1, "batch_size": 8, "l2_conv": 0.01}))
        run = tmp_path / "run"
        assert main(["train", "--cycles", str(pipeline / "store" / "cycles.bin"),
                     "--folds", str(pipeline / "folds" / "folds.csv"),
                     "--fold", "1", "--frontend", "tconv", "--init", "fir",
                     "--no-trainable", "--config", str(cfg),
                     "--out", str(run)]) == 0
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["seed"] == 0
        hist = (run / "history.csv").read_text().strip().splitlines()
        assert len(hist) == 2  # config file's epochs=1 applied


class TestReport:
    def test_reference_rows_reproduced(self, tmp_path):
        runs = tmp_path / "runs"
        runs.mkdir()
        for name, row in REFERENCE_ROWS.items():
            d = runs / name
            d.mkdir()
            with open(d / "eval.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["config", "fold", "tp", "tn", "fp", "fn",
                            "sensitivity_pct", "specificity_pct", "macc_pct"])
                for fold in range(4):
                    w.writerow([name, fold, 0, 0, 0, 0, row["sens"][fold],
                                row["spec"][fold], row["macc"][fold]])
        out = tmp_path / "rep"
        assert main(["report", "--runs", str(runs), "--out", str(out)]) == 0
        summary = json.loads((out / "report.json").read_text())
        for name, row in REFERENCE_ROWS.items():
            got = summary[name]["crossfold"]["macc"]["mean"]
            assert abs(got - row["crossfold_macc"][0]) <= 0.01

    def test_empty_runs_dir_is_data_error(self, tmp_path):
        (tmp_path / "runs").mkdir()
        assert main(["report", "--runs", str(tmp_path / "runs"),
                     "--out", str(tmp_path / "out")]) == 3

    def test_deterministic_ordering(self, tmp_path):
        runs = tmp_path / "runs"
        runs.mkdir()
        for name in ("zeta", "alpha"):
            d = runs / name
            d.mkdir()
            with open(d / "eval.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["config", "fold", "tp", "tn", "fp", "fn",
                            "sensitivity_pct", "specificity_pct", "macc_pct"])
                w.writerow([name, 0, 1, 1, 1, 1, 50.0, 50.0, 50.0])
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["report", "--runs", str(runs), "--out", str(out)]) == 0
        assert digest(a / "report.csv") == digest(b / "report.csv")
        first_config = (a / "report.csv").read_text().splitlines()[1].split(",")[0]
        assert first_config == "alpha"


class TestAnalyze:
    def test_frozen_fir_checkpoint_responses_match_design(self, tmp_path):
        net = build(NetworkConfig(frontend="tconv_free", init="fir_bank",
                                  frontend_trainable=False, seed=0))
        ckpt = tmp_path / "m.ckpt"
        save(net, str(ckpt))
        out = tmp_path / "an"
        assert main(["analyze", "--ckpt", str(ckpt), "--points", "257",
                     "--out", str(out)]) == 0
        bank = default_bank(1000.0, 60)
        for b, filt in enumerate(bank.filters):
            freq, mag, phase = frequency_response(filt, 257)
            rows = list(csv.DictReader(open(out / f"response_band{b}.csv", newline="")))
            got_mag = np.array([float(r["magnitude_db"]) for r in rows])
            assert np.abs(got_mag - mag).max() < 1e-9
        kern_rows = list(csv.DictReader(open(out / "kernels.csv", newline="")))
        assert len(kern_rows) == 4 * 61

    def test_lp_checkpoint_reports_phase_linearity(self, tmp_path):
        net = build(NetworkConfig(frontend="tconv_lp", init="fir_bank", seed=1))
        ckpt = tmp_path / "m.ckpt"
        save(net, str(ckpt))
        out = tmp_path / "an"
        assert main(["analyze", "--ckpt", str(ckpt), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        for band in summary["bands"]:
            assert band["phase_linearity_residual_rad"] < 1e-6
            assert band["group_delay_samples"] == 30.0

    def test_missing_checkpoint_is_data_error(self, tmp_path):
        assert main(["analyze", "--ckpt", str(tmp_path / "nope.ckpt"),
                     "--out", str(tmp_path / "o")]) == 3

    def test_ltsa_export_per_label(self, pipeline, tmp_path):
        net = build(NetworkConfig(frontend="tconv_free", init="fir_bank", seed=0))
        ckpt = tmp_path / "m.ckpt"
        save(net, str(ckpt))
        out = tmp_path / "an"
        assert main(["analyze", "--ckpt", str(ckpt),
                     "--cycles", str(pipeline / "store" / "cycles.bin"),
                     "--out", str(out)]) == 0
        assert (out / "ltsa_normal.csv").exists()
        assert (out / "ltsa_abnormal.csv").exists()
