"""End-to-end smoke test for the somnivit_py bindings.

Generates a tiny cohort, prepares an archive, trains for two epochs,
runs inference with attention read-out, and cross-checks the metric
suite against scikit-learn. Exits nonzero on the first failure.
"""

import tempfile
from pathlib import Path

import numpy as np
import somnivit_py

CONFIG = """
seed = 11

[generator]
n_subjects = 8
epochs_per_subject = [3, 4]
sampling_rate_hz = 128.0

[model]
d_model = 16
n_layers = 1
n_heads = 2
mlp_hidden = 16
head_hidden = 8
branch_hidden = 8
dropout_rate = 0.0
stochastic_depth_survival = 1.0

[train]
epochs = 2
batch_size = 8
"""

STAGES = {"wake", "n1", "n2", "n3", "rem"}
APNEAS = {"no_apnea", "central_apnea", "obstructive_apnea", "obstructive_hypopnea"}


def check_pipeline(root: Path) -> None:
    raw = str(root / "raw")
    archive_dir = str(root / "archive")
    ckpt = str(root / "best.ckpt")

    ids = somnivit_py.synth_cohort(CONFIG, raw)
    assert len(ids) == 8, ids
    print(f"synth: {len(ids)} subjects")

    n_subjects, n_segments = somnivit_py.prepare_archive(CONFIG, raw, archive_dir)
    assert n_subjects == 8 and n_segments >= 24
    print(f"prepare: {n_subjects} subjects, {n_segments} segments")

    archive = somnivit_py.Archive.open(archive_dir)
    assert archive.n_subjects == 8 and archive.n_segments == n_segments
    assert sorted(archive.subject_ids()) == sorted(ids)
    first = ids[0]
    labels = archive.labels(first)
    signal, stage, apnea = archive.segment(first, 0)
    assert signal.shape == (4, 1920) and signal.dtype == np.float32
    assert (stage, apnea) == labels[0]
    assert stage in STAGES and apnea in APNEAS
    assert archive.disorder(first) in {"osa", "hypersomnia", "insomnia", "other"}
    print(f"archive: segment 0 of {first} is {stage}/{apnea}")

    history = somnivit_py.train_model(CONFIG, archive_dir, ckpt)
    assert history["outcome"] == "completed"
    assert history["epochs_run"] == 2 and len(history["epochs"]) == 2
    print(f"train: best epoch {history['best_epoch']} in {history['wall_time_s']:.2f}s")

    model = somnivit_py.Model.load(ckpt)
    assert model.precision == "f32"
    assert model.n_patches == 96
    out = model.predict(signal)
    assert out["stage"] in STAGES and out["apnea"] in APNEAS
    np.testing.assert_allclose(sum(out["stage_probs"]), 1.0, rtol=1e-5)
    np.testing.assert_allclose(sum(out["apnea_probs"]), 1.0, rtol=1e-5)

    importance, per_head = model.attention(signal)
    assert importance.shape == (96,) and per_head.shape == (2, 96)
    assert (importance >= 0).all() and importance.sum() <= 1.0 + 1e-6
    np.testing.assert_allclose(per_head.mean(axis=0), importance, atol=1e-12)
    print(f"model: predicted {out['stage']}/{out['apnea']}, "
          f"{model.param_count} parameters")


def check_metrics() -> None:
    from sklearn.metrics import (
        accuracy_score,
        cohen_kappa_score,
        confusion_matrix,
        precision_recall_fscore_support,
    )

    rng = np.random.default_rng(3)
    true = np.concatenate([np.arange(4), rng.integers(0, 4, 200)])
    pred = true.copy()
    flip = rng.random(len(pred)) < 0.3
    pred[flip] = rng.integers(0, 4, flip.sum())
    pred[:4] = np.arange(4)

    got = somnivit_py.metrics_summary(
        list(map(int, true)), list(map(int, pred)), ["a", "b", "c", "d"]
    )
    p, r, f, _ = precision_recall_fscore_support(true, pred, average="weighted")
    np.testing.assert_allclose(got["accuracy"], accuracy_score(true, pred), atol=1e-12)
    np.testing.assert_allclose(got["precision_weighted"], p, atol=1e-12)
    np.testing.assert_allclose(got["recall_weighted"], r, atol=1e-12)
    np.testing.assert_allclose(got["f1_weighted"], f, atol=1e-12)
    np.testing.assert_allclose(got["kappa"], cohen_kappa_score(true, pred), atol=1e-12)
    assert np.array_equal(np.array(got["confusion"]), confusion_matrix(true, pred))
    print(f"metrics: agree with scikit-learn (accuracy {got['accuracy']:.3f})")


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        check_pipeline(Path(tmp))
    check_metrics()
    print("smoke: OK")


if __name__ == "__main__":
    main()
