import numpy as np

from mlforge import metrics
from mlforge.cli import main
from mlforge.curation import read_manifest, write_manifest
from mlforge.preprocess import Raster, write_raster

from conftest import build_toy_manifest, write_toy_taxonomy


def write_toy_corpus(tmp_path):
    manifest_path = tmp_path / "toy.tsv"
    taxonomy_path = tmp_path / "toy.tax"
    pairs_path = tmp_path / "toy.pairs"
    write_manifest(build_toy_manifest(), manifest_path)
    write_toy_taxonomy(taxonomy_path)
    pairs_path.write_text("6\t5\n", encoding="utf-8")
    return manifest_path, taxonomy_path, pairs_path


def training_manifest(tmp_path, n=48, m=3, seed=0):
    rng = np.random.default_rng(seed)
    lines = []
    truth = rng.normal(size=(4, m))
    X = rng.normal(size=(n, 4))
    Y = X @ truth > 0
    for i in range(n):
        tags = ",".join(f"{j}:1" for j in range(m) if Y[i, j]) or "0:1"
        feats = ",".join(repr(float(v)) for v in X[i])
        lines.append(f"img{i:03d}\turi://t/{i}\t{tags}\t{feats}")
    path = tmp_path / "train.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def base_config(tmp_path, **overrides):
    entries = {
        "eta": 12.0,
        "neg_ratio": 5,
        "skip_prob": 0.1,
        "ref_lr": 0.5,
        "ref_batch": 16,
        "batch": 16,
        "warmup_epochs": 0,
        "decay_every_epochs": 1000,
        "max_epochs": 10000,
        "policy": "step",
    }
    entries.update(overrides)
    path = tmp_path / "run.cfg"
    path.write_text("".join(f"{k}={v}\n" for k, v in entries.items()), encoding="utf-8")
    return path


class TestUsage:
    def test_no_arguments_is_usage_error(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0

    def test_unknown_flag_rejected(self, capsys):
        assert main(["taxonomy-stats", "--taxonomy", "x", "--bogus"]) == 1

    def test_unknown_subcommand(self):
        assert main(["explode"]) == 1


class TestTaxonomyStats:
    def test_report(self, tmp_path, capsys):
        _, tax, _ = write_toy_corpus(tmp_path)
        assert main(["taxonomy-stats", "--taxonomy", str(tax)]) == 0
        out = capsys.readouterr().out
        assert "tree_count=2" in out
        assert "longest_path=4" in out
        assert "nodes, not edges" in out

    def test_missing_file_is_data_error(self, tmp_path, capsys):
        missing = tmp_path / "none.tax"
        missing.write_text("5\t9\t-\tx\n", encoding="utf-8")
        assert main(["taxonomy-stats", "--taxonomy", str(missing)]) == 2
        err = capsys.readouterr().err
        assert err.startswith("E:taxonomy:dangling-parent")


class TestAugment:
    def test_golden_flow_and_fixpoint(self, tmp_path):
        manifest_path, tax, pairs = write_toy_corpus(tmp_path)
        out1 = tmp_path / "aug1.tsv"
        assert main([
            "augment", "--manifest", str(manifest_path), "--taxonomy", str(tax),
            "--pairs", str(pairs), "--out", str(out1),
        ]) == 0
        before = read_manifest(manifest_path)
        after = read_manifest(out1)
        for rec_in, rec_out in zip(before.records, after.records):
            assert set(rec_in.tags) <= set(rec_out.tags)
            if 6 in rec_in.tags:  # sea_snake gains sea and every ancestor
                assert 5 in rec_out.tags
            assert 0 in rec_out.tags or 7 in rec_out.tags  # some root present
        # augment is a fixpoint at the CLI layer
        out2 = tmp_path / "aug2.tsv"
        assert main([
            "augment", "--manifest", str(out1), "--taxonomy", str(tax),
            "--pairs", str(pairs), "--out", str(out2),
        ]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_unknown_tag_exits_2(self, tmp_path, capsys):
        _, tax, _ = write_toy_corpus(tmp_path)
        bad = tmp_path / "bad.tsv"
        bad.write_text("a\tu\t404:1\n", encoding="utf-8")
        out = tmp_path / "o.tsv"
        assert main(["augment", "--manifest", str(bad), "--taxonomy", str(tax), "--out", str(out)]) == 2
        assert capsys.readouterr().err.startswith("E:taxonomy:unknown-category")


class TestCurate:
    def test_filter_and_split(self, tmp_path):
        manifest_path, _, _ = write_toy_corpus(tmp_path)
        out_train = tmp_path / "train.tsv"
        out_val = tmp_path / "val.tsv"
        assert main([
            "curate", "--manifest", str(manifest_path), "--min-count", "2",
            "--val-size", "5", "--val-cap", "2", "--seed", "7",
            "--out-train", str(out_train), "--out-val", str(out_val),
        ]) == 0
        train = read_manifest(out_train)
        val = read_manifest(out_val)
        assert len(train) + len(val) == 20
        assert all(v <= 2 for v in val.category_counts().values())

    def test_deterministic_given_seed(self, tmp_path):
        manifest_path, _, _ = write_toy_corpus(tmp_path)
        outs = []
        for trial in range(2):
            out_train = tmp_path / f"train{trial}.tsv"
            out_val = tmp_path / f"val{trial}.tsv"
            assert main([
                "curate", "--manifest", str(manifest_path),
                "--val-size", "6", "--val-cap", "3", "--seed", "11",
                "--out-train", str(out_train), "--out-val", str(out_val),
            ]) == 0
            outs.append(out_val.read_bytes())
        assert outs[0] == outs[1]

    def test_requires_an_output(self, tmp_path, capsys):
        manifest_path, _, _ = write_toy_corpus(tmp_path)
        assert main(["curate", "--manifest", str(manifest_path)]) == 1


class TestStats:
    def test_report_files_and_figures(self, tmp_path):
        manifest_path, _, _ = write_toy_corpus(tmp_path)
        out_dir = tmp_path / "stats"
        assert main([
            "stats", "--manifest", str(manifest_path), "--out-dir", str(out_dir), "--log2",
        ]) == 0
        report = (out_dir / "report.txt").read_text()
        assert "records=20" in report
        assert "mean_tags_per_image=" in report
        assert "trainable_categories_gt_100=" in report
        per_cat = (out_dir / "images_per_category.csv").read_text().splitlines()
        assert per_cat[0] == "cat_id,count,log2_count"
        assert (out_dir / "tags_per_image.csv").exists()
        assert (out_dir / "images_per_category.png").stat().st_size > 0
        assert (out_dir / "tags_per_image.png").stat().st_size > 0


class TestPreprocess:
    def test_deterministic_replay(self, tmp_path):
        rng = np.random.default_rng(0)
        raster = Raster(rng.uniform(0, 255, size=(24, 30, 3)))
        src = tmp_path / "in.ras"
        write_raster(raster, src)
        outs = []
        for trial in range(2):
            dst = tmp_path / f"out{trial}.ras"
            assert main([
                "preprocess", "--input", str(src), "--out", str(dst),
                "--out-size", "16", "--preprocess-seed", "42",
            ]) == 0
            outs.append(dst.read_bytes())
        assert outs[0] == outs[1]

    def test_bad_pixels_exit_2(self, tmp_path, capsys):
        src = tmp_path / "in.ras"
        src.write_text("1 1 3\n300 0 0\n", encoding="utf-8")
        assert main(["preprocess", "--input", str(src), "--out", str(tmp_path / "o.ras")]) == 2
        assert capsys.readouterr().err.startswith("E:preprocess:pixel-range")


class TestTrainFinetune:
    def test_train_writes_checkpoint_and_loss_log(self, tmp_path):
        manifest = training_manifest(tmp_path)
        cfg = base_config(tmp_path)
        ckpt = tmp_path / "model.ckpt"
        logs = tmp_path / "logs"
        assert main([
            "train", "--config", str(cfg), "--manifest", str(manifest),
            "--steps", "30", "--seed", "3", "--out", str(ckpt), "--out-dir", str(logs),
        ]) == 0
        assert ckpt.exists()
        lines = (logs / "loss_log.csv").read_text().splitlines()
        assert lines[0] == "step,loss,log2_loss"
        assert len(lines) == 31
        assert (logs / "loss_curve.png").stat().st_size > 0

    def test_train_deterministic(self, tmp_path):
        manifest = training_manifest(tmp_path)
        cfg = base_config(tmp_path)
        ckpts = []
        for trial in range(2):
            ckpt = tmp_path / f"model{trial}.ckpt"
            assert main([
                "train", "--config", str(cfg), "--manifest", str(manifest),
                "--steps", "20", "--seed", "5", "--out", str(ckpt),
            ]) == 0
            ckpts.append(ckpt.read_bytes())
        assert ckpts[0] == ckpts[1]

    def test_numerical_blowup_exits_3(self, tmp_path, capsys):
        manifest = training_manifest(tmp_path)
        cfg = base_config(tmp_path, ref_lr=1e280, weight_decay=1e280)
        with np.errstate(all="ignore"):
            code = main([
                "train", "--config", str(cfg), "--manifest", str(manifest),
                "--steps", "20", "--seed", "0", "--out", str(tmp_path / "m.ckpt"),
            ])
        assert code == 3
        assert capsys.readouterr().err.startswith("E:trainer:non-finite")

    def test_finetune_single_label(self, tmp_path):
        manifest = training_manifest(tmp_path)
        cfg = base_config(tmp_path)
        ckpt = tmp_path / "model.ckpt"
        assert main([
            "train", "--config", str(cfg), "--manifest", str(manifest),
            "--steps", "20", "--seed", "1", "--out", str(ckpt),
        ]) == 0
        single = tmp_path / "single.tsv"
        rng = np.random.default_rng(9)
        lines = []
        for i in range(24):
            feats = ",".join(repr(float(v)) for v in rng.normal(size=4))
            lines.append(f"s{i:03d}\turi://s/{i}\t{i % 3}:1\t{feats}")
        single.write_text("\n".join(lines) + "\n", encoding="utf-8")
        out = tmp_path / "tuned.ckpt"
        assert main([
            "finetune", "--checkpoint", str(ckpt), "--config", str(cfg),
            "--manifest", str(single), "--mode", "single", "--steps", "10",
            "--seed", "2", "--out", str(out),
        ]) == 0
        from mlforge.trainer import load_checkpoint

        tuned, _ = load_checkpoint(out)
        assert tuned.stages[-1].activation == "softmax"
        assert tuned.out_dim == 3


class TestEval:
    def test_report_matches_oracle(self, tmp_path, capsys):
        truth = tmp_path / "truth.tsv"
        truth.write_text(
            "a\tu\t0:1,1:1\n" "b\tu\t2:1,3:1\n" "c\tu\t4:1,5:1\n",
            encoding="utf-8",
        )
        rng = np.random.default_rng(4)
        S = rng.random((3, 6))
        metrics.write_scores([("a", S[0]), ("b", S[1]), ("c", S[2])], tmp_path / "scores.tsv")
        report_path = tmp_path / "eval.txt"
        assert main([
            "eval", "--truth", str(truth), "--scores", str(tmp_path / "scores.tsv"),
            "--k", "5", "--out", str(report_path),
            "--per-instance", str(tmp_path / "per.csv"),
        ]) == 0
        Y = np.zeros((3, 6))
        Y[0, [0, 1]] = 1
        Y[1, [2, 3]] = 1
        Y[2, [4, 5]] = 1
        expected = metrics.instance_metrics(Y, S, 5)
        text = report_path.read_text()
        assert text.startswith("k=5 ")
        assert f"precision={expected.precision:.6f}" in text
        assert f"recall={expected.recall:.6f}" in text
        assert f"f1={expected.f1:.6f}" in text
        per = (tmp_path / "per.csv").read_text().splitlines()
        assert per[0] == "instance,precision,recall,f1"
        assert len(per) == 4

    def test_missing_scores_exit_2(self, tmp_path):
        truth = tmp_path / "truth.tsv"
        truth.write_text("a\tu\t0:1\nb\tu\t1:1\n", encoding="utf-8")
        metrics.write_scores([("a", np.array([0.5, 0.5]))], tmp_path / "scores.tsv")
        assert main([
            "eval", "--truth", str(truth), "--scores", str(tmp_path / "scores.tsv"), "--k", "1",
        ]) == 2


class TestFullPipeline:
    def test_curate_augment_train_eval(self, tmp_path):
        # end-to-end golden flow over one toy corpus
        rng = np.random.default_rng(31)
        write_toy_taxonomy(tmp_path / "toy.tax")
        (tmp_path / "toy.pairs").write_text("6\t5\n", encoding="utf-8")
        lines = []
        specific = [2, 3, 4, 6, 10, 11]
        for i in range(30):
            cats = rng.choice(specific, size=int(rng.integers(1, 3)), replace=False)
            tags = ",".join(f"{c}:1" for c in sorted(int(c) for c in cats))
            feats = ",".join(repr(float(v)) for v in rng.normal(size=4))
            lines.append(f"img{i:03d}\turi://p/{i}\t{tags}\t{feats}")
        raw = tmp_path / "raw.tsv"
        raw.write_text("\n".join(lines) + "\n", encoding="utf-8")

        curated = tmp_path / "curated.tsv"
        assert main([
            "curate", "--manifest", str(raw), "--min-count", "2", "--out", str(curated),
        ]) == 0
        assert all(v >= 2 for v in read_manifest(curated).category_counts().values())

        aug = tmp_path / "aug.tsv"
        assert main([
            "augment", "--manifest", str(curated), "--taxonomy", str(tmp_path / "toy.tax"),
            "--pairs", str(tmp_path / "toy.pairs"), "--out", str(aug),
        ]) == 0
        augmented = read_manifest(aug)
        assert all(0 in rec.tags for rec in augmented.records)  # root closure

        cfg = base_config(tmp_path, batch=8, ref_batch=8, ref_lr=1.0)
        ckpt = tmp_path / "model.ckpt"
        assert main([
            "train", "--config", str(cfg), "--manifest", str(aug),
            "--steps", "120", "--seed", "17", "--out", str(ckpt),
        ]) == 0

        from mlforge.cli import manifest_arrays
        from mlforge.trainer import load_checkpoint

        model, _ = load_checkpoint(ckpt)
        X, Y, vocab = manifest_arrays(augmented)
        P, _ = model.forward(X)
        metrics.write_scores(
            [(rec.image_id, P[i]) for i, rec in enumerate(augmented.records)],
            tmp_path / "scores.tsv",
        )
        report = tmp_path / "eval.txt"
        assert main([
            "eval", "--truth", str(aug), "--scores", str(tmp_path / "scores.tsv"),
            "--k", "2", "--out", str(report),
        ]) == 0
        text = report.read_text()
        assert text.startswith("k=2 ")
        expected = metrics.instance_metrics(Y, P, 2)
        assert f"precision={expected.precision:.6f}" in text
        # the trained model ranks true tags well above chance (2 of 11)
        assert expected.precision > 0.5


class TestDistsim:
    def test_outputs_and_determinism(self, tmp_path):
        cfg = base_config(tmp_path, batch=8, ref_batch=8)
        timings = tmp_path / "timings.csv"
        timings.write_text("k,seconds_per_step\n1,0.10\n2,0.11\n", encoding="utf-8")
        digests = []
        for trial in range(2):
            out_dir = tmp_path / f"run{trial}"
            assert main([
                "distsim", "--workers", "2", "--batch", "4", "--steps", "12",
                "--seed", "21", "--config", str(cfg), "--out-dir", str(out_dir),
                "--timings", str(timings),
            ]) == 0
            ckpt = (out_dir / "checkpoint.txt").read_bytes()
            divergence = (out_dir / "divergence.csv").read_text()
            scaling = (out_dir / "scaling.csv").read_text()
            assert (out_dir / "throughput.png").stat().st_size > 0
            assert (out_dir / "efficiency.png").stat().st_size > 0
            assert all(
                line.split(",")[1] == "0.0"
                for line in divergence.splitlines()[1:]
            )
            digests.append((ckpt, divergence, scaling))
        assert digests[0] == digests[1]
        scaling_lines = digests[0][2].splitlines()
        assert scaling_lines[0] == "k,images_per_second,efficiency"
        assert scaling_lines[1].startswith("1,")
        assert scaling_lines[2].startswith("2,")
