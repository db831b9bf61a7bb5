import numpy as np
import pytest

from sinkrank.cli import main
from sinkrank.exact import k_sort
from sinkrank.losses import synthetic_linear_dataset
from sinkrank.measures import uniform_weights

PAPER_X = [0.38, 4.0, -2.0, 6.0, -9.0]


def write_vector(path, values, header=None):
    lines = [] if header is None else [header]
    lines += [repr(float(v)) for v in values]
    path.write_text("\n".join(lines) + "\n")


def read_values(path):
    lines = path.read_text().splitlines()
    return lines[0], np.array([float(v) for v in lines[1:]])


class TestRankSortCommands:
    def test_paper_example_ranks(self, tmp_path):
        inp = tmp_path / "x.txt"
        write_vector(inp, PAPER_X, header="# values from the running example")
        out = tmp_path / "ranks.txt"
        code = main(
            ["rank", str(inp), "--output", str(out), "--epsilon", "1e-4",
             "--max-iters", "20000"]
        )
        assert code == 0
        header, values = read_values(out)
        assert header == "s_ranks"
        np.testing.assert_allclose(values, [3, 4, 2, 5, 1], atol=0.05)
        manifest = (tmp_path / "ranks.txt.manifest").read_text()
        assert "command=rank" in manifest
        assert "epsilon=0.0001" in manifest

    def test_collapse_at_huge_epsilon(self, tmp_path):
        inp = tmp_path / "x.txt"
        write_vector(inp, PAPER_X)
        out = tmp_path / "ranks.txt"
        assert main(["rank", str(inp), "--output", str(out), "--epsilon", "1e3"]) == 0
        _, values = read_values(out)
        np.testing.assert_allclose(values, 3.0, atol=1e-2)

    def test_sort_with_custom_target_weights(self, tmp_path):
        inp = tmp_path / "x.txt"
        x = np.linspace(-1.0, 1.0, 20) ** 3
        write_vector(inp, x)
        out = tmp_path / "sorts.txt"
        code = main(
            ["sort", str(inp), "--output", str(out), "--m", "3",
             "--quantile-weights", "0.25,0.1,0.65", "--epsilon", "1e-4",
             "--max-iters", "20000"]
        )
        assert code == 0
        _, values = read_values(out)
        assert values.size == 3
        assert np.all(np.diff(values) >= -1e-9)
        exact = k_sort(
            uniform_weights(20), x, np.array([0.25, 0.1, 0.65]),
            np.array([0.0, 0.5, 1.0]),
        )
        np.testing.assert_allclose(values, exact, atol=0.05 * np.ptp(x))

    def test_rerun_is_byte_identical(self, tmp_path):
        inp = tmp_path / "x.txt"
        write_vector(inp, PAPER_X)
        out = tmp_path / "r.txt"
        args = ["rank", str(inp), "--output", str(out), "--epsilon", "1e-2"]
        assert main(args) == 0
        first = out.read_bytes(), (tmp_path / "r.txt.manifest").read_bytes()
        assert main(args) == 0
        second = out.read_bytes(), (tmp_path / "r.txt.manifest").read_bytes()
        assert first == second


class TestSweepCommand:
    def test_sweep_endpoints(self, tmp_path, rng):
        from conftest import separated_uniform

        x = separated_uniform(rng, 10, min_gap=0.03)
        inp = tmp_path / "x.txt"
        write_vector(inp, x)
        out = tmp_path / "sweep.tsv"
        code = main(
            ["sweep-epsilon", str(inp), "--output", str(out),
             "--epsilons", "1e-4,1e-2,1e3", "--eta", "1e-4",
             "--max-iters", "20000"]
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("epsilon\tkind")
        rows = {}
        for line in lines[1:]:
            cells = line.split("\t")
            rows[(float(cells[0]), cells[1])] = np.array(
                [float(c) for c in cells[2:]]
            )
        hard = np.argsort(np.argsort(x)) + 1
        np.testing.assert_allclose(rows[(1e-4, "rank")], hard, atol=0.05)
        np.testing.assert_allclose(rows[(1e3, "rank")], 5.5, atol=1e-2)
        np.testing.assert_allclose(
            rows[(1e3, "sort")], x.mean(), atol=1e-2 * np.ptp(x)
        )


class TestQuantileCommand:
    def test_emits_scalar_and_plan(self, tmp_path, rng):
        x = rng.uniform(0, 1, 20)
        inp = tmp_path / "x.txt"
        write_vector(inp, x)
        out = tmp_path / "q.txt"
        code = main(
            ["quantile", str(inp), "--output", str(out), "--tau", "0.3",
             "--t", "0.1", "--epsilon", "1e-2"]
        )
        assert code == 0
        header, values = read_values(out)
        assert header == "soft_quantile"
        assert x.min() <= values[0] <= x.max()
        plan_lines = (tmp_path / "q.txt.plan").read_text().splitlines()
        assert plan_lines[0] == "to_left\tto_filler\tto_right"
        plan = np.array([[float(c) for c in l.split("\t")] for l in plan_lines[1:]])
        assert plan.shape == (20, 3)
        np.testing.assert_allclose(plan.sum(axis=1), 1 / 20, atol=1e-3)
        np.testing.assert_allclose(plan.sum(axis=0), [0.25, 0.1, 0.65], atol=1e-3)


class TestRegressionCommand:
    def _dataset(self, tmp_path, n=256, seed=0):
        X, z = synthetic_linear_dataset(n, seed=seed)
        path = tmp_path / "data.txt"
        lines = [f"{float(X[i, 0])!r} {float(z[i])!r}" for i in range(n)]
        path.write_text("\n".join(lines) + "\n")
        return path

    def test_zero_epochs_single_row_per_mode(self, tmp_path):
        data = self._dataset(tmp_path)
        out = tmp_path / "trace.tsv"
        code = main(
            ["quantile-regression", str(data), "--output", str(out),
             "--epochs", "0", "--batch-size", "64"]
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "mode\tepoch\ttrain_quantile\ttest_quantile\tmse"
        assert len(lines) == 3  # one initial row per mode
        assert lines[1].startswith("soft\t0\t")
        assert lines[2].startswith("baseline\t0\t")

    def test_fixed_seed_reruns_identical(self, tmp_path):
        data = self._dataset(tmp_path)
        out = tmp_path / "trace.tsv"
        args = ["quantile-regression", str(data), "--output", str(out),
                "--epochs", "3", "--batch-size", "64", "--seed", "7"]
        assert main(args) == 0
        first = out.read_bytes()
        assert main(args) == 0
        assert out.read_bytes() == first

    def test_training_improves_over_baseline_initial(self, tmp_path):
        data = self._dataset(tmp_path, n=512, seed=3)
        out = tmp_path / "trace.tsv"
        code = main(
            ["quantile-regression", str(data), "--output", str(out),
             "--epochs", "40", "--batch-size", "128", "--step-size", "1e-2"]
        )
        assert code == 0
        rows = [l.split("\t") for l in out.read_text().splitlines()[1:]]
        soft = [r for r in rows if r[0] == "soft"]
        baseline = [r for r in rows if r[0] == "baseline"]
        assert float(soft[-1][2]) <= float(baseline[0][2])


class TestErrorHandling:
    def test_missing_file_is_usage_error(self, tmp_path):
        assert main(["rank", str(tmp_path / "absent.txt")]) == 1

    def test_parse_error_reports_line(self, tmp_path, capsys):
        inp = tmp_path / "bad.txt"
        inp.write_text("1.0\nnot-a-number\n")
        assert main(["rank", str(inp)]) == 1
        assert ":2:" in capsys.readouterr().err

    def test_bad_flag_value_is_usage_error(self, tmp_path):
        inp = tmp_path / "x.txt"
        write_vector(inp, PAPER_X)
        assert main(["rank", str(inp), "--cost-p", "0.3"]) == 1

    def test_nonconvergence_is_numerical_failure(self, tmp_path, capsys):
        inp = tmp_path / "x.txt"
        write_vector(inp, PAPER_X)
        code = main(
            ["rank", str(inp), "--epsilon", "1e-2", "--eta", "1e-12",
             "--max-iters", "2"]
        )
        assert code == 2
        assert "2 iterations" in capsys.readouterr().err

    def test_unknown_command_is_usage_error(self):
        assert main(["frobnicate"]) == 1
