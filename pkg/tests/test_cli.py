import json

import numpy as np
import pytest

from chmerge import Checkpoint, read_tensor_file, write_tensor_file
from chmerge.cli import main
from chmerge.tensor_io import load_bundle


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--experts", "3", "--layers", "2",
                 "--rows", "8", "--cols", "16", "--corpus", "100"]) == 0
    return out


def _experts(d, n=3):
    args = ["--base", str(d / "base.safetensors")]
    for i in range(n):
        args += ["--expert", f"expert{i}={d / f'expert{i}.safetensors'}"]
    return args


def _err(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def _dir_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_merge_defaults_and_storage(synth, tmp_path, capsys):
    assert main(["merge", *_experts(synth), "--out", str(tmp_path / "b")]) == 0
    out = capsys.readouterr().out
    assert "weight_ratio=0.6666666666666666" in out
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert manifest["k"] == 2 and manifest["lambda"] == 0.5
    assert manifest["prune"] == {"kind": "dare", "ratio": 0.3, "rescale": True}
    assert manifest["cluster"]["strategy"] == "kmeans"
    assert manifest["cluster"]["metric"] == "cosine"
    assert manifest["cluster"]["granularity"] == "channel"


def test_k_one_reconstructs_identically(synth, tmp_path):
    b = tmp_path / "b"
    assert main(["merge", *_experts(synth), "--k", "1", "--out", str(b)]) == 0
    blobs = []
    for i in range(3):
        target = tmp_path / f"r{i}.safetensors"
        assert main(["reconstruct", "--bundle", str(b), "--expert", f"expert{i}", "--out", str(target)]) == 0
        ckpt = read_tensor_file(target)
        blobs.append([v.tobytes() for v in ckpt.layers.values()])
    assert blobs[0] == blobs[1] == blobs[2]


def test_k_too_large_is_usage_error(synth, tmp_path, capsys):
    assert main(["merge", *_experts(synth), "--k", "4", "--out", str(tmp_path / "b")]) == 2
    err = _err(capsys)
    assert err["code"] == 2 and err["error"] == "usage"


def test_reconstruct_identity_bytes(synth, tmp_path):
    b = tmp_path / "b"
    assert main(["merge", *_experts(synth), "--k", "3", "--lambda", "1", "--prune", "none",
                 "--granularity", "model", "--out", str(b)]) == 0
    index = load_bundle(b).indices
    groups = {name: int(index[name][next(iter(index[name]))][0]) for name in index}
    assert sorted(groups.values()) == [0, 1, 2]
    for i in range(3):
        target = tmp_path / f"e{i}.safetensors"
        assert main(["reconstruct", "--bundle", str(b), "--expert", f"expert{i}", "--out", str(target)]) == 0
        got = read_tensor_file(target)
        want = read_tensor_file(synth / f"expert{i}.safetensors")
        assert got.layers.keys() == want.layers.keys()
        for layer in got.layers:
            assert got[layer].tobytes() == want[layer].tobytes()


def test_config_round_trip(synth, tmp_path):
    b1, b2 = tmp_path / "b1", tmp_path / "b2"
    assert main(["merge", *_experts(synth), "--k", "2", "--prune", "ties", "--ratio", "0.5",
                 "--metric", "manhattan", "--seed", "17", "--out", str(b1)]) == 0
    assert main(["merge", "--config", str(b1 / "manifest.json"), "--out", str(b2)]) == 0
    assert _dir_bytes(b1) == _dir_bytes(b2)


def test_flags_override_config_and_env_seed(synth, tmp_path, monkeypatch):
    b1 = tmp_path / "b1"
    assert main(["merge", *_experts(synth), "--seed", "3", "--out", str(b1)]) == 0
    b2 = tmp_path / "b2"
    assert main(["merge", "--config", str(b1 / "manifest.json"), "--k", "3", "--out", str(b2)]) == 0
    m2 = json.loads((b2 / "manifest.json").read_text())
    assert m2["k"] == 3 and m2["seed"] == 3
    monkeypatch.setenv("CM_SEED", "41")
    b3 = tmp_path / "b3"
    assert main(["merge", *_experts(synth), "--out", str(b3)]) == 0
    assert json.loads((b3 / "manifest.json").read_text())["seed"] == 41


def test_every_ablation_flag(synth, tmp_path):
    runs = [
        ["--granularity", "layer"], ["--granularity", "model"],
        ["--strategy", "random"], ["--strategy", "sign"],
        ["--metric", "euclidean"], ["--metric", "manhattan"],
        ["--ratio", "0"], ["--ratio", "0.7"], ["--k", "1"], ["--k", "3"],
    ]
    for i, extra in enumerate(runs):
        assert main(["merge", *_experts(synth), *extra, "--out", str(tmp_path / f"b{i}")]) == 0, extra


def test_sign_with_three_groups_fails(synth, tmp_path, capsys):
    code = main(["merge", *_experts(synth), "--strategy", "sign", "--k", "3", "--out", str(tmp_path / "b")])
    assert code == 2
    assert "two groups" in _err(capsys)["message"]


def test_threads_do_not_change_bytes(synth, tmp_path):
    for t in ("1", "8"):
        assert main(["merge", *_experts(synth), "--threads", t, "--out", str(tmp_path / t)]) == 0
    assert _dir_bytes(tmp_path / "1") == _dir_bytes(tmp_path / "8")


def _complementary_bundle(tmp_path, synth):
    b = tmp_path / "b"
    assert main(["merge", *_experts(synth, 2), "--k", "2", "--prune", "none",
                 "--granularity", "model", "--out", str(b)]) == 0
    return b


def test_analyze_overlap_and_storage(synth, tmp_path, capsys):
    b = _complementary_bundle(tmp_path, synth)
    assert main(["analyze", "overlap", "--bundle", str(b), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "overlap.csv").read_text().splitlines()
    assert rows[0] == "expert_a,expert_b,fraction"
    assert "expert0,expert1,0.0" in rows and "expert0,expert0,1.0" in rows
    assert main(["analyze", "storage", "--bundle", str(b)]) == 0
    assert "weight_ratio=1.0" in capsys.readouterr().out


def test_analyze_similarity(synth, tmp_path):
    assert main(["analyze", "similarity", "--base", str(synth / "base.safetensors"),
                 "--reference", f"expert0={synth / 'expert0.safetensors'}",
                 "--candidate", f"expert1={synth / 'expert1.safetensors'}",
                 "--candidate", f"expert2={synth / 'expert2.safetensors'}",
                 "--out", str(tmp_path)]) == 0
    text = (tmp_path / "similarity.csv").read_text().splitlines()
    assert text[0].startswith("# rows=deltas") and text[1] == "layer,candidate,proportion"
    assert len(text) == 2 + 2 * 2


def test_router_train_and_route(synth, tmp_path, capsys):
    model = tmp_path / "router.safetensors"
    assert main(["router", "train", "--data", str(synth / "queries.jsonl"), "--out", str(model),
                 "--dim", "4096"]) == 0
    capsys.readouterr()
    assert main(["router", "route", "--model", str(model), "--query", "solve 3x+1=10"]) == 0
    result = json.loads(capsys.readouterr().out.splitlines()[0])
    assert result["chosen"] == "math"


def test_route_then_reconstruct(tmp_path, capsys):
    data = tmp_path / "d"
    assert main(["synth", "--out", str(data), "--experts", "2", "--layers", "1", "--rows", "4",
                 "--cols", "4", "--corpus", "50"]) == 0
    lines = (data / "queries.jsonl").read_text().splitlines()
    mapping = {"math": "expert0", "code": "expert1"}
    keep = [json.loads(l) for l in lines]
    keep = [{"text": q["text"], "label": mapping[q["label"]]} for q in keep if q["label"] in mapping]
    (data / "q2.jsonl").write_text("\n".join(json.dumps(q) for q in keep) + "\n")
    model = tmp_path / "r.safetensors"
    assert main(["router", "train", "--data", str(data / "q2.jsonl"), "--out", str(model), "--dim", "1024"]) == 0
    bundle = tmp_path / "b"
    assert main(["merge", *_experts(data, 2), "--out", str(bundle)]) == 0
    routed, direct = tmp_path / "routed.safetensors", tmp_path / "direct.safetensors"
    assert main(["router", "route", "--model", str(model), "--query", "integral of x^2",
                 "--bundle", str(bundle), "--out", str(routed)]) == 0
    assert main(["reconstruct", "--bundle", str(bundle), "--expert", "expert0", "--out", str(direct)]) == 0
    assert routed.read_bytes() == direct.read_bytes()


def test_inspect(synth, tmp_path, capsys):
    b = _complementary_bundle(tmp_path, synth)
    capsys.readouterr()
    assert main(["inspect", "--bundle", str(b)]) == 0
    assert json.loads(capsys.readouterr().out)["experts"] == ["expert0", "expert1"]


def test_error_exit_codes(synth, tmp_path, capsys):
    assert main(["merge", "--base", str(synth / "base.safetensors"), "--out", str(tmp_path)]) == 2
    assert _err(capsys)["error"] == "usage"
    assert main(["bogus"]) == 2
    capsys.readouterr()

    odd = tmp_path / "odd.safetensors"
    write_tensor_file(Checkpoint({"layers.0.weight": np.zeros((3, 3))}), odd)
    code = main(["merge", "--base", str(synth / "base.safetensors"), "--expert", f"x={odd}",
                 "--k", "1", "--out", str(tmp_path / "o")])
    assert code == 3 and _err(capsys)["error"] == "data"

    b = _complementary_bundle(tmp_path, synth)
    (b / "group_1.safetensors").unlink()
    assert main(["inspect", "--bundle", str(b)]) == 4
    assert _err(capsys)["error"] == "corrupt_bundle"

    assert main(["reconstruct", "--bundle", str(tmp_path / "missing"), "--expert", "x",
                 "--out", str(tmp_path / "y")]) in (3, 4)
