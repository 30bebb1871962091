"""Tests for the CLI module."""

import json
import re
import shutil

import pytest
from click.testing import CliRunner

from lesion_bench import __version__
from lesion_bench.cli import cli
from lesion_bench.core_model import PredictionRecord
from lesion_bench.dataset_io import load_manifest, write_classification_csv
from lesion_bench.parallel import THREADS_ENV_VAR
from lesion_bench.report import load_report
from lesion_bench.synth import DEFAULT_SEED, make_rng


LOG_LINE = re.compile(r"^(DEBUG|INFO|WARNING|ERROR|CRITICAL): ")
CODED_LOG_LINE = re.compile(r"^(DEBUG|INFO|WARNING|ERROR|CRITICAL): [A-Z][A-Za-z]+: \S")


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def cli_runner():
    """Create a Click CLI test runner."""
    return CliRunner()


@pytest.fixture
def seg_paths(synthetic_dir):
    root = synthetic_dir / "segmentation"
    return root / "manifest.csv", root / "submissions"


@pytest.fixture
def cls_paths(synthetic_dir):
    root = synthetic_dir / "classification"
    return root / "manifest.csv", root / "submissions"


class TestCliHelp:
    """Tests for CLI help commands."""

    def test_main_help(self, cli_runner):
        """Should show main help with every command."""
        result = cli_runner.invoke(cli, ["--help"])

        assert result.exit_code == 0
        assert "Lesion analysis challenge scoring CLI" in result.output
        for command in ("score-seg", "score-attr", "score-cls", "rank", "synth", "derive-threshold"):
            assert command in result.output

    def test_version(self, cli_runner):
        """Should print the package version."""
        result = cli_runner.invoke(cli, ["--version"])

        assert result.exit_code == 0
        assert __version__ in result.output


class TestScoreSegCommand:
    """Tests for the score-seg command."""

    def test_scores_submission(self, cli_runner, seg_paths, temp_dir):
        """Should write a valid report and per-image CSV."""
        manifest, submissions = seg_paths
        out = temp_dir / "reports"

        result = cli_runner.invoke(cli, ["score-seg", str(manifest), str(submissions / "perturbed"), "-o", str(out)])

        assert result.exit_code == 0, result.output
        assert "perturbed: TJ=" in result.output
        report = load_report(out / "perturbed.report.json")
        assert report.results["n_images"] == 8
        assert report.manifest_digest == load_manifest(manifest).digest
        assert (out / "perturbed.images.csv").exists()

    def test_perfect_submission(self, cli_runner, seg_paths, temp_dir):
        """Should score the ground truth itself as TJ = J = 1."""
        manifest, _ = seg_paths

        result = cli_runner.invoke(
            cli,
            ["score-seg", str(manifest), str(manifest.parent / "truth"), "-s", "oracle", "-o", str(temp_dir / "r")],
        )

        assert result.exit_code == 0, result.output
        assert "oracle: TJ=1.0000 J=1.0000 F=0.0000" in result.output

    def test_worker_count_does_not_change_output(self, cli_runner, seg_paths, temp_dir):
        """Should write byte-identical reports for 1, 4 and 16 workers."""
        manifest, submissions = seg_paths

        outputs = []
        for workers in (1, 4, 16):
            out = temp_dir / f"w{workers}"
            result = cli_runner.invoke(
                cli,
                ["score-seg", str(manifest), str(submissions / "seg_000"), "-o", str(out), "-w", str(workers)],
            )
            assert result.exit_code == 0, result.output
            outputs.append(
                ((out / "seg_000.report.json").read_bytes(), (out / "seg_000.images.csv").read_bytes())
            )

        assert outputs[0] == outputs[1] == outputs[2]

    def test_threshold_option(self, cli_runner, seg_paths, temp_dir):
        """Should score at the requested threshold."""
        manifest, submissions = seg_paths
        out = temp_dir / "r"

        result = cli_runner.invoke(
            cli, ["score-seg", str(manifest), str(submissions / "seg_000"), "-t", "0.5", "-o", str(out)]
        )

        assert result.exit_code == 0, result.output
        assert load_report(out / "seg_000.report.json").results["threshold"] == 0.5

    def test_missing_prediction(self, cli_runner, seg_paths, temp_dir):
        """Should exit 2 and name the image without a mask."""
        manifest, submissions = seg_paths
        partial = temp_dir / "partial"
        shutil.copytree(submissions / "seg_001", partial)
        (partial / "synth_00003_segmentation.png").unlink()

        result = cli_runner.invoke(cli, ["score-seg", str(manifest), str(partial), "-o", str(temp_dir / "r")])

        assert result.exit_code == 2
        assert "MissingPrediction" in result.output
        assert "synth_00003" in result.output
        assert not (temp_dir / "r" / "partial.report.json").exists()

    def test_wrong_task(self, cli_runner, cls_paths, temp_dir):
        """Should refuse a manifest for another task."""
        manifest, _ = cls_paths

        result = cli_runner.invoke(cli, ["score-seg", str(manifest), str(temp_dir), "-o", str(temp_dir / "r")])

        assert result.exit_code == 2
        assert "ValidationError" in result.output

    def test_bad_sidecar(self, cli_runner, seg_paths, temp_dir):
        """Should exit 2 naming the sidecar when the threshold is not a number."""
        manifest, submissions = seg_paths
        sidecar = manifest.with_suffix(".json")
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        sidecar.write_text(json.dumps({**meta, "threshold": "abc"}), encoding="utf-8")

        result = cli_runner.invoke(cli, ["score-seg", str(manifest), str(submissions / "seg_000"), "-o", str(temp_dir / "r")])

        assert result.exit_code == 2
        assert "ERROR: ParseError: " in result.output
        assert str(sidecar) in result.output
        assert "column threshold" in result.output

    def test_log_lines_carry_codes(self, cli_runner, seg_paths, temp_dir):
        """Should write every diagnostic as LEVEL: code: message."""
        manifest, submissions = seg_paths
        partial = temp_dir / "partial"
        shutil.copytree(submissions / "seg_000", partial)
        (partial / "synth_00000_segmentation.png").unlink()

        ok = cli_runner.invoke(cli, ["score-seg", str(manifest), str(submissions / "perturbed"), "-o", str(temp_dir / "r")])
        failed = cli_runner.invoke(cli, ["score-seg", str(manifest), str(partial), "-o", str(temp_dir / "r")])

        assert ok.exit_code == 0, ok.output
        assert failed.exit_code == 2
        log_lines = [line for result in (ok, failed) for line in result.output.splitlines() if LOG_LINE.match(line)]
        assert any(line.startswith("INFO: Progress: ") for line in log_lines)
        assert any(line.startswith("ERROR: MissingPrediction: ") for line in log_lines)
        for line in log_lines:
            assert CODED_LOG_LINE.match(line), line

    def test_thread_cap_from_environment(self, cli_runner, seg_paths, temp_dir):
        """Should cap --workers at the environment thread count."""
        manifest, submissions = seg_paths

        result = cli_runner.invoke(
            cli,
            ["-v", "score-seg", str(manifest), str(submissions / "seg_000"), "-w", "16", "-o", str(temp_dir / "r")],
            env={THREADS_ENV_VAR: "2"},
        )

        assert result.exit_code == 0, result.output
        assert f"DEBUG: Progress: capping 16 workers at {THREADS_ENV_VAR}=2" in result.output

    def test_invalid_thread_environment(self, cli_runner, seg_paths, temp_dir):
        """Should warn about a bad thread count and still score."""
        manifest, submissions = seg_paths

        result = cli_runner.invoke(
            cli,
            ["score-seg", str(manifest), str(submissions / "seg_000"), "-o", str(temp_dir / "r")],
            env={THREADS_ENV_VAR: "many"},
        )

        assert result.exit_code == 0, result.output
        assert f"WARNING: InvalidConfig: ignoring {THREADS_ENV_VAR}='many'" in result.output


class TestScoreAttrCommand:
    """Tests for the score-attr command."""

    def test_scores_submission(self, cli_runner, synthetic_dir, temp_dir):
        """Should report the mean and per-attribute Jaccard."""
        root = synthetic_dir / "attributes"
        out = temp_dir / "reports"

        result = cli_runner.invoke(
            cli, ["score-attr", str(root / "manifest.csv"), str(root / "submissions" / "attr_000"), "-o", str(out)]
        )

        assert result.exit_code == 0, result.output
        assert "mean Jaccard=" in result.output
        assert "globules:" in result.output
        report = load_report(out / "attr_000.report.json")
        assert sorted(report.results["attributes"]) == ["globules", "streaks"]

    def test_perfect_submission(self, cli_runner, synthetic_dir, temp_dir):
        """Should score the ground truth itself as Jaccard 1 for every attribute."""
        root = synthetic_dir / "attributes"
        out = temp_dir / "reports"

        result = cli_runner.invoke(
            cli, ["score-attr", str(root / "manifest.csv"), str(root / "truth"), "-s", "oracle", "-o", str(out)]
        )

        assert result.exit_code == 0, result.output
        assert "oracle: mean Jaccard=1.0000" in result.output
        aggregates = load_report(out / "oracle.report.json").results["aggregates"]
        assert set(aggregates.values()) == {1.0}

    def test_worker_count_does_not_change_output(self, cli_runner, synthetic_dir, temp_dir):
        """Should write byte-identical reports for 1, 4 and 16 workers."""
        root = synthetic_dir / "attributes"

        outputs = []
        for workers in (1, 4, 16):
            out = temp_dir / f"w{workers}"
            result = cli_runner.invoke(
                cli,
                ["score-attr", str(root / "manifest.csv"), str(root / "submissions" / "attr_000"), "-o", str(out), "-w", str(workers)],
            )
            assert result.exit_code == 0, result.output
            outputs.append(tree_bytes(out))

        assert outputs[0] == outputs[1] == outputs[2]
        assert sorted(outputs[0]) == ["attr_000.images.csv", "attr_000.report.json"]


class TestScoreClsCommand:
    """Tests for the score-cls command."""

    def test_scores_submission(self, cli_runner, cls_paths, temp_dir):
        """Should print every scope and write the report."""
        manifest, submissions = cls_paths
        out = temp_dir / "reports"

        result = cli_runner.invoke(cli, ["score-cls", str(manifest), str(submissions / "cls_000.csv"), "-o", str(out)])

        assert result.exit_code == 0, result.output
        assert "cls_000 ALL: BACC=" in result.output
        assert load_report(out / "cls_000.report.json").results["scopes"]["ALL"]["n"] == 8

    def test_worker_count_does_not_change_output(self, cli_runner, cls_paths, temp_dir):
        """Should write byte-identical reports for 1, 4 and 16 workers."""
        manifest, submissions = cls_paths

        outputs = []
        for workers in (1, 4, 16):
            out = temp_dir / f"w{workers}"
            result = cli_runner.invoke(
                cli,
                ["score-cls", str(manifest), str(submissions / "cls_001.csv"), "-o", str(out), "-w", str(workers)],
            )
            assert result.exit_code == 0, result.output
            outputs.append(tree_bytes(out))

        assert outputs[0] == outputs[1] == outputs[2]
        assert sorted(outputs[0]) == ["cls_001.images.csv", "cls_001.report.json"]

    def test_fixture_1512(self, cli_runner, fixture_1512_path, temp_dir):
        """Should score a random submission against the shipped fixture."""
        manifest = load_manifest(fixture_1512_path)
        rng = make_rng(DEFAULT_SEED, 0)
        records = [
            PredictionRecord(image_id, tuple(float(p) for p in rng.uniform(0.0, 1.0, 7)))
            for image_id in manifest.image_ids()
        ]
        csv_path = write_classification_csv(records, temp_dir / "random.csv")
        out = temp_dir / "reports"

        result = cli_runner.invoke(cli, ["score-cls", str(fixture_1512_path), str(csv_path), "-o", str(out)])

        assert result.exit_code == 0, result.output
        scopes = load_report(out / "random.report.json").results["scopes"]
        assert (scopes["ALL"]["n"], scopes["INTERNAL"]["n"], scopes["EXTERNAL"]["n"]) == (1512, 1196, 316)
        assert 0.0 < scopes["ALL"]["metrics"]["bacc"] < 0.4

    def test_extra_rows(self, cli_runner, cls_paths, temp_dir):
        """Should exit 2 on rows for images the manifest does not list."""
        manifest, submissions = cls_paths
        text = (submissions / "cls_000.csv").read_text(encoding="utf-8")
        bad = temp_dir / "bad.csv"
        bad.write_text(text + "intruder,0,0,0,0,0,0,0\n", encoding="utf-8")

        result = cli_runner.invoke(cli, ["score-cls", str(manifest), str(bad), "-o", str(temp_dir / "r")])

        assert result.exit_code == 2
        assert "ExtraRows" in result.output
        assert "intruder" in result.output

    def test_internal_error(self, cli_runner, cls_paths, temp_dir, monkeypatch):
        """Should exit 1 with an InternalError line on unexpected failures."""
        manifest, submissions = cls_paths

        def explode(*args, **kwargs):
            raise RuntimeError("boom")

        monkeypatch.setattr("lesion_bench.cli.score_classification", explode)

        result = cli_runner.invoke(
            cli, ["score-cls", str(manifest), str(submissions / "cls_000.csv"), "-o", str(temp_dir / "r")]
        )

        assert result.exit_code == 1
        assert "InternalError: RuntimeError: boom" in result.output


class TestRankCommand:
    """Tests for the rank command."""

    def score_all(self, cli_runner, command, manifest, submissions, out):
        for submission in submissions:
            result = cli_runner.invoke(cli, [command, str(manifest), str(submission), "-o", str(out)])
            assert result.exit_code == 0, result.output

    def test_segmentation_ranking(self, cli_runner, seg_paths, temp_dir):
        """Should write the leaderboard, histogram and top table."""
        manifest, submissions = seg_paths
        reports = temp_dir / "reports"
        self.score_all(cli_runner, "score-seg", manifest, sorted(submissions.iterdir()), reports)
        out = temp_dir / "ranking"

        result = cli_runner.invoke(cli, ["rank", str(reports), "-c", "jaccard", "-o", str(out)])

        assert result.exit_code == 0, result.output
        assert "Leaderboard by thresholded_jaccard:" in result.output
        leaderboard = json.loads((out / "leaderboard.json").read_text(encoding="utf-8"))
        assert leaderboard["metric"] == "thresholded_jaccard"
        assert sorted(row["submission_id"] for row in leaderboard["rows"]) == ["perturbed", "seg_000", "seg_001"]
        assert leaderboard["rows"][0]["rank"] == 1
        for name in ("leaderboard.csv", "histogram.json", "histogram.svg", "top.json", "divergence.json"):
            assert (out / name).exists()

    def test_classification_ranking(self, cli_runner, cls_paths, temp_dir):
        """Should add the gap histogram and generalization scatter for classification."""
        manifest, submissions = cls_paths
        reports = temp_dir / "reports"
        self.score_all(cli_runner, "score-cls", manifest, sorted(submissions.iterdir()), reports)
        out = temp_dir / "ranking"

        result = cli_runner.invoke(
            cli, ["rank", str(reports / "*.report.json"), "-m", "bacc", "-c", "acc", "-o", str(out)]
        )

        assert result.exit_code == 0, result.output
        assert "Leaderboard by bacc:" in result.output
        for name in ("divergence.json", "gap_histogram.json", "gap_histogram.svg", "generalization.json"):
            assert (out / name).exists()
        top = json.loads((out / "top.json").read_text(encoding="utf-8"))
        assert [row["rank"] for row in top] == sorted(row["rank"] for row in top)
        assert "GAP.bacc" in top[0]

    def test_rerun_is_byte_identical(self, cli_runner, cls_paths, temp_dir):
        """Should write identical ranking files when run twice on the same reports."""
        manifest, submissions = cls_paths
        reports = temp_dir / "reports"
        self.score_all(cli_runner, "score-cls", manifest, sorted(submissions.iterdir()), reports)

        for name in ("one", "two"):
            result = cli_runner.invoke(cli, ["rank", str(reports / "*.report.json"), "-m", "bacc", "-c", "acc", "-o", str(temp_dir / name)])
            assert result.exit_code == 0, result.output

        one = tree_bytes(temp_dir / "one")
        assert one == tree_bytes(temp_dir / "two")
        assert {"leaderboard.json", "histogram.svg", "gap_histogram.json", "generalization.json"} <= set(one)

    def test_tiny_bin_width(self, cli_runner, cls_paths, temp_dir):
        """Should exit 2 when the bin width would need too many bins."""
        manifest, submissions = cls_paths
        reports = temp_dir / "reports"
        self.score_all(cli_runner, "score-cls", manifest, sorted(submissions.iterdir()), reports)

        result = cli_runner.invoke(cli, ["rank", str(reports / "*.report.json"), "--bin-width", "1e-300", "-o", str(temp_dir / "ranking")])

        assert result.exit_code == 2
        assert "ERROR: ValidationError: " in result.output
        assert "bins" in result.output

    def test_single_report_identical_metrics(self, cli_runner, cls_paths, temp_dir):
        """Should rank a lone report first and give rho = 1 when comparing a metric with itself."""
        manifest, submissions = cls_paths
        reports = temp_dir / "reports"
        self.score_all(cli_runner, "score-cls", manifest, sorted(submissions.iterdir()), reports)
        out = temp_dir / "ranking"

        single = cli_runner.invoke(
            cli, ["rank", str(reports / "cls_000.report.json"), "-o", str(temp_dir / "single")]
        )
        same = cli_runner.invoke(cli, ["rank", str(reports), "-m", "bacc", "-c", "bacc", "-o", str(out)])

        assert single.exit_code == 0, single.output
        rows = json.loads((temp_dir / "single" / "leaderboard.json").read_text(encoding="utf-8"))["rows"]
        assert [(row["rank"], row["submission_id"]) for row in rows] == [(1, "cls_000")]
        assert same.exit_code == 0, same.output
        divergence = json.loads((out / "divergence.json").read_text(encoding="utf-8"))
        assert divergence["spearman_rho"] == pytest.approx(1.0)
        assert divergence["off_diagonal"] == []

    def test_unknown_metric(self, cli_runner, cls_paths, temp_dir):
        """Should exit 2 when ranking by a metric the reports lack."""
        manifest, submissions = cls_paths
        reports = temp_dir / "reports"
        self.score_all(cli_runner, "score-cls", manifest, [submissions / "cls_000.csv"], reports)

        result = cli_runner.invoke(cli, ["rank", str(reports), "-m", "f1", "-o", str(temp_dir / "ranking")])

        assert result.exit_code == 2
        assert "UnknownMetric" in result.output

    def test_no_reports(self, cli_runner, temp_dir):
        """Should exit 2 when nothing matches."""
        result = cli_runner.invoke(cli, ["rank", str(temp_dir / "*.report.json"), "-o", str(temp_dir / "ranking")])

        assert result.exit_code == 2
        assert "InsufficientData" in result.output


class TestSynthCommand:
    """Tests for the synth command."""

    def test_deterministic(self, cli_runner, small_config, temp_dir):
        """Should write identical trees for the same config."""
        config = temp_dir / "config.json"
        config.write_text(json.dumps(small_config.to_dict()), encoding="utf-8")

        for name in ("one", "two"):
            result = cli_runner.invoke(cli, ["synth", str(config), "-o", str(temp_dir / name)])
            assert result.exit_code == 0, result.output

        one = sorted(p.relative_to(temp_dir / "one") for p in (temp_dir / "one").rglob("*") if p.is_file())
        two = sorted(p.relative_to(temp_dir / "two") for p in (temp_dir / "two").rglob("*") if p.is_file())
        assert one == two
        for relative in one:
            assert (temp_dir / "one" / relative).read_bytes() == (temp_dir / "two" / relative).read_bytes()

    def test_invalid_config(self, cli_runner, temp_dir):
        """Should exit 2 on unknown config keys."""
        config = temp_dir / "config.json"
        config.write_text(json.dumps({"seed": 1, "n_imgs": 3}), encoding="utf-8")

        result = cli_runner.invoke(cli, ["synth", str(config), "-o", str(temp_dir / "out")])

        assert result.exit_code == 2
        assert "InvalidConfig" in result.output
        assert "n_imgs" in result.output

    def test_mistyped_config(self, cli_runner, temp_dir):
        """Should exit 2 naming the config file when a count is not an integer."""
        config = temp_dir / "config.json"
        config.write_text(json.dumps({"seed": 1, "n_images": 4.0}), encoding="utf-8")

        result = cli_runner.invoke(cli, ["synth", str(config), "-o", str(temp_dir / "out")])

        assert result.exit_code == 2
        assert f"ERROR: InvalidConfig: {config}: n_images must be an integer" in result.output


class TestDeriveThresholdCommand:
    """Tests for the derive-threshold command."""

    def test_published_values(self, cli_runner):
        """Should derive T = 0.65 from the three interobserver agreements."""
        result = cli_runner.invoke(cli, ["derive-threshold", "0.743", "0.754", "0.861"])

        assert result.exit_code == 0, result.output
        assert "threshold: 0.65\n" in result.output
        assert "mean: 0.786\n" in result.output
        assert "range: 0.118\n" in result.output

    def test_single_value(self, cli_runner):
        """Should exit 2 with fewer than two values."""
        result = cli_runner.invoke(cli, ["derive-threshold", "0.8"])

        assert result.exit_code == 2
        assert "InsufficientData" in result.output

    def test_out_of_range(self, cli_runner):
        """Should exit 2 for agreements above one."""
        result = cli_runner.invoke(cli, ["derive-threshold", "0.8", "1.2"])

        assert result.exit_code == 2
        assert "DomainError" in result.output
