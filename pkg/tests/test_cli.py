import json
import os

import numpy as np
import pytest

from xckit.cli import build_parser, main
from xckit.io_formats import read_feature_csv, write_feature_csv
from xckit.meta import FeatureRow


def run(argv):
    return main(argv)


def make_store(tmp_path, name="store", frames=5, seed=42):
    out = str(tmp_path / name)
    assert run(["synth", "--out", out, "--frames", str(frames), "--seed", str(seed)]) == 0
    return out


def oracle_rows(n=60, seed=0):
    # top_score separates the classes perfectly; everything else is noise
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        is_tp = i % 2 == 0
        rows.append(
            FeatureRow(
                top_score=float(rng.uniform(0.7, 1.0) if is_tp else rng.uniform(0.0, 0.3)),
                xc_s_plus=float(rng.uniform()), xc_c_plus=float(rng.uniform()),
                xc_s_minus=float(rng.uniform()), xc_c_minus=float(rng.uniform()),
                xc_s_plus_valid=True, xc_c_plus_valid=True,
                xc_s_minus_valid=True, xc_c_minus_valid=True,
                n_points=int(rng.integers(10, 300)),
                distance=float(rng.uniform(1, 50)),
                pred_label="car",
                is_tp=is_tp,
            )
        )
    return rows


class TestParserDefaults:
    def test_xc_defaults(self):
        args = build_parser().parse_args(
            ["xc", "--frames", "a", "--attribs", "b", "--out", "c"]
        )
        assert args.a_thresh == 0.1
        assert args.margin == 0.2
        assert args.score_thresh == 0.1

    def test_attribute_defaults(self):
        args = build_parser().parse_args(["attribute", "--frames", "a", "--out", "b"])
        assert args.method == "backprop"
        assert args.steps == 32
        assert args.targets == "top-class"

    def test_match_defaults(self):
        args = build_parser().parse_args(
            ["match", "--preds", "a", "--gts", "b", "--out", "c"]
        )
        assert args.score_thresh == 0.1
        assert args.iou == "car=0.5,pedestrian=0.25,cyclist=0.25"

    def test_bad_method_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(
                ["attribute", "--frames", "a", "--out", "b", "--method", "shap"]
            )
        assert exc.value.code == 2

    def test_missing_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([])
        assert exc.value.code == 2


class TestSynth:
    def test_store_layout(self, tmp_path):
        store = make_store(tmp_path)
        for name in ("scene.json", "model.json", "manifest.json", "preds.jsonl", "gts.jsonl"):
            assert os.path.exists(os.path.join(store, name))
        frames = os.listdir(os.path.join(store, "frames"))
        assert len(frames) == 5 and all(f.endswith(".xcam") for f in frames)

    def test_deterministic_reruns(self, tmp_path):
        a = make_store(tmp_path, "a")
        b = make_store(tmp_path, "b")
        for rel in ("preds.jsonl", "gts.jsonl", os.path.join("frames", "000000.xcam")):
            pa = open(os.path.join(a, rel), "rb").read()
            pb = open(os.path.join(b, rel), "rb").read()
            assert pa == pb

    def test_config_overrides_flag(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"frames": 2}))
        out = str(tmp_path / "s")
        assert run(["synth", "--out", out, "--frames", "9", "--config", str(cfg)]) == 0
        assert len(os.listdir(os.path.join(out, "frames"))) == 2

    def test_unknown_config_key_exits_2(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n_frames": 2}))
        assert run(["synth", "--out", str(tmp_path / "s"), "--config", str(cfg)]) == 2


class TestAttribute:
    def test_one_map_per_prediction(self, tmp_path):
        store = make_store(tmp_path, frames=3)
        out = str(tmp_path / "attribs")
        assert run(["attribute", "--frames", store, "--out", out, "--jobs", "2"]) == 0
        n_preds = sum(1 for _ in open(os.path.join(store, "preds.jsonl")))
        assert len(os.listdir(out)) == n_preds

    def test_rerun_overwrites_identically(self, tmp_path):
        store = make_store(tmp_path, frames=2)
        out = str(tmp_path / "attribs")
        assert run(["attribute", "--frames", store, "--out", out]) == 0
        name = sorted(os.listdir(out))[0]
        first = open(os.path.join(out, name), "rb").read()
        assert run(["attribute", "--frames", store, "--out", out]) == 0
        assert open(os.path.join(out, name), "rb").read() == first

    def test_jobs_env_fallback_invalid(self, tmp_path, monkeypatch):
        store = make_store(tmp_path, frames=1)
        monkeypatch.setenv("XCKIT_JOBS", "many")
        assert run(["attribute", "--frames", store, "--out", str(tmp_path / "o")]) == 2

    def test_jobs_env_fallback_valid(self, tmp_path, monkeypatch):
        store = make_store(tmp_path, frames=1)
        monkeypatch.setenv("XCKIT_JOBS", "2")
        assert run(["attribute", "--frames", store, "--out", str(tmp_path / "o")]) == 0

    def test_missing_store_is_data_error(self, tmp_path):
        assert run(["attribute", "--frames", str(tmp_path / "nope"), "--out", "x"]) == 1


class TestXcAndMatch:
    def test_feature_rows_written(self, tmp_path):
        store = make_store(tmp_path, frames=3)
        attribs = str(tmp_path / "attribs")
        run(["attribute", "--frames", store, "--out", attribs])
        csv_path = str(tmp_path / "features.csv")
        assert run(
            ["xc", "--frames", store, "--attribs", attribs,
             "--a-thresh", "0.0015", "--out", csv_path]
        ) == 0
        rows = read_feature_csv(csv_path)
        n_preds = sum(1 for _ in open(os.path.join(store, "preds.jsonl")))
        assert len(rows) == n_preds  # all synthetic scores clear the ignore bar

    def test_missing_map_is_data_error(self, tmp_path):
        store = make_store(tmp_path, frames=2)
        attribs = str(tmp_path / "attribs")
        run(["attribute", "--frames", store, "--out", attribs])
        os.remove(os.path.join(attribs, sorted(os.listdir(attribs))[0]))
        assert run(
            ["xc", "--frames", store, "--attribs", attribs, "--out", str(tmp_path / "f.csv")]
        ) == 1

    def test_match_tags_every_prediction(self, tmp_path):
        store = make_store(tmp_path, frames=4)
        out = str(tmp_path / "tags.jsonl")
        assert run(
            ["match", "--preds", os.path.join(store, "preds.jsonl"),
             "--gts", os.path.join(store, "gts.jsonl"), "--out", out]
        ) == 0
        tags = [json.loads(l) for l in open(out)]
        n_preds = sum(1 for _ in open(os.path.join(store, "preds.jsonl")))
        assert len(tags) == n_preds
        assert all(t["tag"] in ("TP", "FP", "Ignore") for t in tags)
        assert all(t["tag"] != "Ignore" for t in tags)  # planted scores are high

    def test_bad_iou_flag_exits_2(self, tmp_path):
        store = make_store(tmp_path, frames=1)
        assert run(
            ["match", "--preds", os.path.join(store, "preds.jsonl"),
             "--gts", os.path.join(store, "gts.jsonl"),
             "--iou", "car:0.5", "--out", str(tmp_path / "t")]
        ) == 2


class TestEval:
    def test_oracle_feature_scores_one(self, tmp_path, capsys):
        csv_path = str(tmp_path / "f.csv")
        write_feature_csv(csv_path, oracle_rows())
        assert run(["eval", "--features", csv_path]) == 0
        out = capsys.readouterr().out
        line = next(l for l in out.splitlines() if l.startswith("top_score"))
        assert "1.000" in line

    def test_group_by_rows_present(self, tmp_path, capsys):
        store = make_store(tmp_path, frames=4)
        attribs = str(tmp_path / "attribs")
        run(["attribute", "--frames", store, "--out", attribs])
        csv_path = str(tmp_path / "f.csv")
        run(["xc", "--frames", store, "--attribs", attribs,
             "--a-thresh", "0.0015", "--out", csv_path])
        table_path = str(tmp_path / "table.txt")
        assert run(
            ["eval", "--features", csv_path, "--group-by", "class,points100",
             "--out", table_path]
        ) == 0
        text = open(table_path).read()
        assert "feature" in text and "AUROC" in text
        assert "car," in text

    def test_unknown_group_token_exits_2(self, tmp_path):
        csv_path = str(tmp_path / "f.csv")
        write_feature_csv(csv_path, oracle_rows())
        assert run(["eval", "--features", csv_path, "--group-by", "color"]) == 2

    def test_missing_csv_is_data_error(self, tmp_path):
        assert run(["eval", "--features", str(tmp_path / "nope.csv")]) == 1


class TestTrainMeta:
    def test_report_written(self, tmp_path, capsys):
        csv_path = str(tmp_path / "f.csv")
        write_feature_csv(csv_path, oracle_rows(n=120))
        report = str(tmp_path / "report.txt")
        assert run(
            ["train-meta", "--features", csv_path, "--subset", "top_score",
             "--seed", "0", "--out", report]
        ) == 0
        text = open(report).read()
        assert "auroc:" in text and "features: top_score" in text

    def test_unknown_subset_exits_2(self, tmp_path):
        csv_path = str(tmp_path / "f.csv")
        write_feature_csv(csv_path, oracle_rows())
        assert run(["train-meta", "--features", csv_path, "--subset", "volume"]) == 2

    def test_subset_order_irrelevant(self, tmp_path, capsys):
        csv_path = str(tmp_path / "f.csv")
        write_feature_csv(csv_path, oracle_rows(n=120))
        assert run(["train-meta", "--features", csv_path,
                    "--subset", "top_score,xc_c_plus"]) == 0
        a = capsys.readouterr().out
        assert run(["train-meta", "--features", csv_path,
                    "--subset", "xc_c_plus,top_score"]) == 0
        b = capsys.readouterr().out
        assert a == b


class TestPipeline:
    def test_demo_pipeline_completes(self, tmp_path, capsys):
        cfg = tmp_path / "demo.json"
        cfg.write_text(
            json.dumps(
                {
                    "out": str(tmp_path / "pipe"),
                    "scene": {"rng_seed": 42},
                    "n_frames": 20,
                    "eval": {"group_by": "class,points100", "seed": 0},
                    "train_meta": {"seed": 0},
                }
            )
        )
        assert run(["pipeline", "--config", str(cfg)]) == 0
        out_dir = tmp_path / "pipe"
        for rel in ("store", "attribs", "features.csv", "table.txt",
                    "tags.jsonl", "meta_report.txt"):
            assert (out_dir / rel).exists()
        table = (out_dir / "table.txt").read_text()
        for feature in ("top_score", "xc_s_plus", "xc_c_minus", "n_points", "random"):
            assert feature in table
        assert "AUROC" in table

    def test_pipeline_deterministic(self, tmp_path):
        results = []
        for name in ("p1", "p2"):
            cfg = tmp_path / f"{name}.json"
            cfg.write_text(
                json.dumps(
                    {
                        "out": str(tmp_path / name),
                        "scene": {"rng_seed": 7},
                        "n_frames": 4,
                        "train_meta": {"enabled": False},
                    }
                )
            )
            assert run(["pipeline", "--config", str(cfg)]) == 0
            results.append((tmp_path / name / "features.csv").read_bytes())
        assert results[0] == results[1]

    def test_pipeline_without_out_exits_2(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"scene": {}}))
        assert run(["pipeline", "--config", str(cfg)]) == 2

    def test_pipeline_bad_json_is_data_error(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        assert run(["pipeline", "--config", str(cfg)]) == 1
