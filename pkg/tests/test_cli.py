import json

import pytest

from kreplay.cli import main
from kreplay.config import ConfigError, load_config, parse_pairs, read_config_file
from kreplay.pipeline import PhaseFailed, run


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "run.log"}


@pytest.fixture
def pipeline(tiny_conf, tmp_path):
    """gen-data, pretrain and finetune on the tiny config."""
    data = run("gen-data", tmp_path / "data", tiny_conf)
    common = (f"data={data}",)
    run("pretrain", tmp_path / "pre", tiny_conf, common)
    run("finetune", tmp_path / "ft", tiny_conf, (*common, f"init={tmp_path / 'pre'}"))
    return tmp_path, common


# -- config ------------------------------------------------------------------------


def test_phase_keys_win_for_their_phase(tmp_path):
    path = tmp_path / "c.conf"
    path.write_text("lr_max = 1e-3\nfinetune.lr_max = 5e-4  # gentler\n")
    assert load_config(path, (), "finetune").lr_max == 5e-4
    assert load_config(path, (), "pretrain").lr_max == 1e-3
    assert load_config(path, ("lr_max=2e-3",), "pretrain").lr_max == 2e-3


def test_phase_selection_defaults():
    assert load_config(None, (), "finetune").select_by == "cider"
    assert load_config(None, (), "pretrain").cider_floor == 0.0
    assert load_config(None, ("select_by=cider",), "kreplay").select_by == "cider"


@pytest.mark.parametrize("text", ["nonsense = 1\n", "epochs = many\n", "just words\n", "bogus.epochs = 1\n",
                                  "use_replay = maybe\n", "decode_method = sample\n"])
def test_bad_config_lines(tmp_path, text):
    path = tmp_path / "c.conf"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path, (), "finetune")


def test_config_error_names_the_line(tmp_path):
    path = tmp_path / "c.conf"
    path.write_text("seed = 1\n\nfoo = 2\n")
    with pytest.raises(ConfigError, match=":3"):
        read_config_file(path)


def test_override_needs_equals():
    with pytest.raises(ConfigError):
        parse_pairs(["seed"], "--override")


# -- exit codes ------------------------------------------------------------------------


def test_unknown_override_exits_2(tmp_path):
    assert main(["gen-data", "--override", "colour=red", "--out", str(tmp_path / "x")]) == 2


def test_missing_config_file_exits_4(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "none.conf"), "--out", str(tmp_path / "x")]) == 4


def test_infeasible_bank_exits_3(tmp_path):
    argv = ["gen-data", "--override", "num_concepts=100", "--override", "num_unseen=50",
            "--override", "d_patch=4", "--out", str(tmp_path / "x")]
    assert main(argv) == 3


def test_missing_dataset_exits_4(tmp_path):
    assert main(["pretrain", "--override", f"data={tmp_path / 'nothing'}", "--out", str(tmp_path / "x")]) == 4


def test_kreplay_without_teacher_exits_4(pipeline, tiny_conf):
    root, common = pipeline
    with pytest.raises(PhaseFailed) as err:
        run("kreplay-train", root / "kr", tiny_conf, (*common, f"init={root / 'pre'}"))
    assert err.value.code == 4


def test_nonexistent_checkpoint_exits_4(pipeline, tiny_conf):
    root, common = pipeline
    argv = ["eval", "--config", str(tiny_conf), "--out", str(root / "ev"),
            "--override", common[0], "--override", f"checkpoint={root / 'nope.ckpt'}"]
    assert main(argv) == 4


def test_invalid_image_id_exits_4(pipeline, tiny_conf):
    root, common = pipeline
    argv = ["decode", "--config", str(tiny_conf), "--out", str(root / "dec"), "--override", common[0],
            "--override", f"checkpoint={root / 'ft'}", "--override", "image_ids=999999"]
    assert main(argv) == 4


def test_vocab_mismatch_exits_3(pipeline, tiny_conf, tmp_path):
    root, _ = pipeline
    other = run("gen-data", tmp_path / "other", None, ("n_pretrain=30", "seed=3"))
    argv = ["eval", "--config", str(tiny_conf), "--out", str(root / "ev"),
            "--override", f"data={other}", "--override", f"checkpoint={root / 'ft'}"]
    assert main(argv) == 3


def test_corrupt_manifest_exits_3(pipeline, tiny_conf):
    root, common = pipeline
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    manifest["counts"]["replay"] += 1
    (root / "data" / "manifest.json").write_text(json.dumps(manifest))
    assert main(["finetune", "--config", str(tiny_conf), "--out", str(root / "x"), "--override", common[0],
                 "--override", f"init={root / 'pre'}"]) == 3


# -- behaviour ---------------------------------------------------------------------------


def test_gen_data_is_byte_identical(tiny_conf, tmp_path):
    a = run("gen-data", tmp_path / "a", tiny_conf)
    b = run("gen-data", tmp_path / "b", tiny_conf)
    assert files(a) == files(b)
    record = json.loads((a / "run.json").read_text())
    assert record["command"] == "gen-data" and "manifest.json" in record["outputs"]


def test_every_command_writes_run_record(pipeline):
    root, _ = pipeline
    for d in ("data", "pre", "ft"):
        assert (root / d / "run.json").exists() and (root / d / "run.log").exists()
    record = json.loads((root / "ft" / "run.json").read_text())
    assert record["config"]["select_by"] == "cider"


def test_greedy_decode_equals_beam_of_one(pipeline, tiny_conf):
    root, common = pipeline
    ck = f"checkpoint={root / 'ft'}"
    greedy = run("decode", root / "g", tiny_conf, (*common, ck, "decode_method=greedy"))
    beam = run("decode", root / "b", tiny_conf, (*common, ck, "decode_method=beam", "beam_width=1"))
    g = [json.loads(x) for x in (greedy / "captions.jsonl").read_text().splitlines()]
    b = [json.loads(x) for x in (beam / "captions.jsonl").read_text().splitlines()]
    assert len(g) == 6
    assert [x["caption"] for x in g] == [x["caption"] for x in b]
    assert [x["logprob"] for x in g] == pytest.approx([x["logprob"] for x in b], abs=1e-9)


def test_decode_selected_ids(pipeline, tiny_conf):
    root, common = pipeline
    ids = json.loads((root / "data" / "concept_test_captions.json").read_text())["images"]
    pick = f"{ids[2]['id']},{ids[0]['id']}"
    out = run("decode", root / "d", tiny_conf, (*common, f"checkpoint={root / 'ft'}", f"image_ids={pick}"))
    rows = [json.loads(x) for x in (out / "captions.jsonl").read_text().splitlines()]
    assert [r["image_id"] for r in rows] == [ids[2]["id"], ids[0]["id"]]
    assert all(r["b"] == 2 and r["method"] == "beam" for r in rows)


def test_finetune_equals_kreplay_without_replay(pipeline, tiny_conf):
    root, common = pipeline
    run("kreplay-train", root / "kr0", tiny_conf,
        (*common, f"init={root / 'pre'}", f"teacher={root / 'ft'}", "use_replay=false",
         "lambda_k=0", "lambda_d=0", "select_by=cider"))
    for name in ("epoch001.ckpt", "epoch002.ckpt", "loss_log.csv"):
        assert (root / "ft" / name).read_bytes() == (root / "kr0" / name).read_bytes(), name


def test_eval_report_blocks_and_determinism(pipeline, tiny_conf):
    root, common = pipeline
    ck = f"checkpoint={root / 'ft'}"
    a = run("eval", root / "ea", tiny_conf, (*common, ck))
    b = run("eval", root / "eb", tiny_conf, (*common, ck))
    report = json.loads((a / "report.json").read_text())
    assert set(report) == {"generic", "concept", "seen", "unseen"}
    assert report["seen"]["count"] + report["unseen"]["count"] == report["concept"]["count"]
    assert report["unseen"]["rec"] is not None
    for name in ("report.json", "report.csv", "captions.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
