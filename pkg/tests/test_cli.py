import csv
import json

import pytest

from dxarisk import cli
from dxarisk import cohort as co

SMALL = {
    "seed": 7,
    "synthetic": {"n_male_control": 70, "n_male_case": 20, "n_female_control": 60, "n_female_case": 18},
    "selection": {"tsne": False},
    "tabtrans": {"token_dim": 8, "n_heads": 2, "n_layers": 1, "ffn_dim": 8, "max_epochs": 4, "patience": 2,
                 "lr": 1e-3},
    "baselines": {"folds": 3, "tune_top": 1, "grids": {"logistic_regression": {"C": [0.1, 1.0]},
                                                     "decision_tree": {"max_depth": [2, 4]}}},
    "evaluation": {"repeats": 2},
}


def small_config(**overrides):
    return cli.config_from_dict({**SMALL, **overrides})


def quiet(_msg):
    pass


class TestConfig:
    def test_defaults(self):
        cfg = cli.config_from_dict({})
        assert cfg.synthetic is not None and cfg.input is None and cfg.seed == 2024

    def test_field_level_diagnostics(self):
        with pytest.raises(cli.ConfigError) as exc:
            cli.config_from_dict({"seed": -1, "bogus": 1, "tabtrans": {"token_dim": 30, "n_heads": 4},
                                  "selection": {"alpa": 0.2}})
        problems = exc.value.problems
        assert "seed: must be a non-negative integer" in problems
        assert "bogus: unknown field" in problems
        assert "selection.alpa: unknown field" in problems
        assert any(p.startswith("tabtrans:") and "divisible" in p for p in problems)

    def test_exactly_one_source(self):
        with pytest.raises(cli.ConfigError, match="exactly one"):
            cli.config_from_dict({"input": {"baseline": "a.csv", "followup": "b.csv"}, "synthetic": {}})
        with pytest.raises(cli.ConfigError, match="exactly one"):
            cli.config_from_dict({"synthetic": None})
        cfg = cli.config_from_dict({"input": {"baseline": "a.csv", "followup": "b.csv"}})
        assert cfg.synthetic is None and cfg.input.baseline == "a.csv"

    def test_unknown_grid_kind(self):
        with pytest.raises(cli.ConfigError, match="grids for unknown baseline kinds"):
            cli.config_from_dict({"baselines": {"grids": {"lr": {"C": [1.0]}}}})

    def test_bad_section_type(self):
        with pytest.raises(cli.ConfigError, match="augmentation: expected an object"):
            cli.config_from_dict({"augmentation": 3})

    def test_load_config_errors(self, tmp_path):
        with pytest.raises(cli.ConfigError, match="cannot read"):
            cli.load_config(tmp_path / "none.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        with pytest.raises(cli.ConfigError, match="not valid JSON"):
            cli.load_config(bad)

    def test_hash_tracks_every_field(self):
        base = small_config()
        assert base.hash() == small_config().hash()
        assert base.hash() != small_config(seed=8).hash()
        assert base.hash() != small_config(evaluation={"repeats": 3}).hash()


class TestMain:
    def test_print_config(self, capsys, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(SMALL))
        assert cli.main(["--config", str(path), "--seed", "3", "--print-config"]) == cli.EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert doc["seed"] == 3 and doc["selection"]["tsne"] is False

    def test_invalid_config_exit_1(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": "x"}))
        assert cli.main(["--config", str(path), "pipeline"]) == cli.EXIT_VALIDATION
        assert "seed" in capsys.readouterr().err

    def test_unknown_stage(self, tmp_path):
        assert cli.main(["--out", str(tmp_path), "train-everything"]) == cli.EXIT_VALIDATION

    def test_stage_required(self):
        assert cli.main([]) == cli.EXIT_VALIDATION

    def test_positional_and_flag_disagree(self, tmp_path):
        assert cli.main(["--out", str(tmp_path), "--stage", "generate", "preprocess"]) == cli.EXIT_VALIDATION

    def test_preprocess_without_input(self, tmp_path, capsys):
        assert cli.main(["--out", str(tmp_path / "run"), "--stage", "preprocess"]) == cli.EXIT_VALIDATION
        err = capsys.readouterr().err
        assert str(tmp_path / "run" / "generate" / "baseline.csv") in err

    def test_missing_input_file(self, tmp_path):
        cfg = cli.config_from_dict({"input": {"baseline": str(tmp_path / "b.csv"), "followup": str(tmp_path / "f.csv")}})
        msgs = []
        assert cli.run_subcommand("generate", cfg, tmp_path / "run", log=msgs.append) == cli.EXIT_VALIDATION
        assert any("b.csv" in m for m in msgs)

    def test_runtime_error_exit_2(self, tmp_path, monkeypatch):
        def boom(run):
            raise RuntimeError("disk on fire")

        monkeypatch.setitem(cli.STAGE_FUNCS, "generate", boom)
        msgs = []
        assert cli.run_subcommand("generate", small_config(), tmp_path, log=msgs.append) == cli.EXIT_RUNTIME
        assert "disk on fire" in msgs[-1]


class TestRunDirectory:
    def test_write_once(self, tmp_path):
        cfg = small_config()
        assert cli.run_subcommand("generate", cfg, tmp_path, log=quiet) == cli.EXIT_OK
        msgs = []
        assert cli.run_subcommand("generate", cfg, tmp_path, log=msgs.append) == cli.EXIT_VALIDATION
        assert "write-once" in msgs[-1]

    def test_other_config_refused(self, tmp_path):
        assert cli.run_subcommand("generate", small_config(), tmp_path, log=quiet) == cli.EXIT_OK
        msgs = []
        assert cli.run_subcommand("preprocess", small_config(seed=99), tmp_path, log=msgs.append) == cli.EXIT_VALIDATION
        assert "different config" in msgs[-1]

    def test_derived_seeds_differ_per_stage(self):
        run = cli.Run(small_config())
        seeds = {run.seed(s) for s in cli.STAGES}
        assert len(seeds) == len(cli.STAGES)
        assert run.seed("generate") == co.derive_seed(7, "generate")


@pytest.fixture(scope="module")
def small_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = small_config()
    assert cli.run_subcommand("pipeline", cfg, base / "piped", log=quiet) == cli.EXIT_OK
    for stage in cli.STAGES:
        assert cli.run_subcommand(stage, cfg, base / "staged", log=quiet) == cli.EXIT_OK, stage
    return base / "piped", base / "staged"


def files(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestPipeline:
    def test_stage_by_stage_equals_pipeline(self, small_runs):
        piped, staged = map(files, small_runs)
        assert piped.keys() == staged.keys()
        differing = [k for k in piped if piped[k] != staged[k]]
        assert differing == []

    def test_every_stage_has_manifest(self, small_runs):
        piped = small_runs[0]
        for stage in cli.STAGES:
            doc = json.loads((piped / stage / "stage_manifest.json").read_text())
            assert doc["stage"] == stage and doc["outputs"]
        top = json.loads((piped / "manifest.json").read_text())
        assert top["config_hash"] == small_config().hash()

    def test_manifest_hashes_match_files(self, small_runs):
        piped = small_runs[0]
        import hashlib

        for stage in cli.STAGES:
            doc = json.loads((piped / stage / "stage_manifest.json").read_text())
            for rel, digest in {**doc["inputs"], **doc["outputs"]}.items():
                assert hashlib.sha256((piped / rel).read_bytes()).hexdigest() == digest, rel

    def test_comparison_rows(self, small_runs):
        rows = list(csv.DictReader(open(small_runs[0] / "evaluate" / "comparison.csv")))
        names = [r["model_name"] for r in rows]
        assert len(rows) >= 9 and "tabtrans" in names and "llm_mock_heuristic" in names
        assert set(cli.bl.KINDS) <= set(names)

    def test_interpret_outputs(self, small_runs):
        d = small_runs[0] / "interpret"
        assert (d / "importance.csv").exists()
        manifest = json.loads((d / "manifest.json").read_text())
        assert manifest["importance_method"]
