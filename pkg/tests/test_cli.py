import csv
import subprocess
import sys

import numpy as np
import pytest

from lifmixer.cli import main
from lifmixer.lif import available_backends
from lifmixer.tensor import load_tensor, save_tensor

def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = d / "run.cfg"
    cfg.write_text("embed_dim=8\nsynth_n=30\neval_n=30\nepochs=2\nbatch_size=16\n")
    code = main(["train", "--config", str(cfg), "--metrics", str(d / "m.csv"), "--checkpoint", str(d / "m.ckpt")])
    assert code == 0
    return d, cfg


def test_gradcheck_default(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0 and out.rstrip().endswith("ALL PASS")
    assert out.count("PASS lif_backward") >= 20


def test_gradcheck_fault_names_op(capsys):
    code, out, _ = run(capsys, "gradcheck", "--cases", "2", "--inject-fault", "dwconv3x3")
    assert code == 1 and "FAIL dwconv3x3" in out and "worst at index" in out


def test_gradcheck_lif_fault(capsys):
    code, out, _ = run(capsys, "gradcheck", "--cases", "2", "--inject-fault", "lif_backward")
    assert code == 1 and "FAIL lif_backward" in out


def test_gradcheck_groups_one_has_clamp_case(capsys):
    code, out, _ = run(capsys, "gradcheck", "--groups", "1", "--cases", "2", "--shapes", "1x2x5x5")
    assert code == 0 and "lif_clamp_identity" in out and "shape=(1, 2, 5, 5)" in out


def test_count_variants(capsys):
    code, out, _ = run(capsys, "count", "tiny")
    assert code == 0 and "params 28313848" in out and "PASS" in out
    code, out, _ = run(capsys, "count", "base")
    assert code == 0 and "(87.84M)" in out and "(15.24G)" in out


def test_count_custom_has_no_reference(capsys, tmp_path):
    (tmp_path / "t.cfg").write_text("variant=tiny\nembed_dim=32\n")
    code, out, _ = run(capsys, "count", "--config", str(tmp_path / "t.cfg"))
    assert code == 0 and "reference" not in out
    code, out, _ = run(capsys, "count", "toy")
    assert code == 0 and "reference" not in out


def test_usage_errors(capsys, tmp_path):
    assert run(capsys, "count", "huge")[0] == 2
    assert run(capsys, "bench", "--op", "matmul")[0] == 2
    assert run(capsys)[0] == 2
    (tmp_path / "bad.cfg").write_text("nonsense=1\n")
    code, _, err = run(capsys, "count", "--config", str(tmp_path / "bad.cfg"))
    assert code == 2 and "unknown key" in err


def test_io_errors(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "none.ckpt"))
    assert code == 3 and "none.ckpt" in err
    code, _, err = run(capsys, "count", "--config", str(tmp_path / "none.cfg"))
    assert code == 3 and "none.cfg" in err
    code, _, err = run(capsys, "train", "--dataset", "cifar10", "--data-path", str(tmp_path / "nope"))
    assert code == 3 and "nope" in err


def test_train_eval_round(capsys, trained):
    d, cfg = trained
    rows = list(csv.reader((d / "m.csv").open()))
    assert rows[0] == ["epoch", "step", "loss", "acc", "lr"] and len(rows) == 3
    code, out, _ = run(capsys, "eval", "--config", str(cfg), "--checkpoint", str(d / "m.ckpt"))
    assert code == 0 and "top1" in out


def test_eval_shape_mismatch(capsys, trained):
    d, _ = trained
    (d / "wide.cfg").write_text("embed_dim=16\n")
    code, _, err = run(capsys, "eval", "--checkpoint", str(d / "m.ckpt"), "--config", str(d / "wide.cfg"))
    assert code == 2 and "shape mismatch" in err


def test_train_deterministic_csv(capsys, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--epochs", "2", "--seed", "4", "--threads", "1",
                     "--config", str(_cfg(tmp_path)), "--metrics", str(tmp_path / f"{name}.csv"),
                     "--checkpoint", str(tmp_path / f"{name}.ckpt")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def _cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text("embed_dim=8\nsynth_n=30\nbatch_size=16\n")
    return p


def test_export_features(capsys, trained, tmp_path):
    d, _ = trained
    img = np.random.default_rng(0).random((1, 3, 32, 32), dtype=np.float32)
    save_tensor(tmp_path / "img.lift", img)
    out = tmp_path / "f.lift"
    code, text, _ = run(capsys, "export-features", "--checkpoint", str(d / "m.ckpt"), "--image",
                        str(tmp_path / "img.lift"), "--layer", "stage0.block0.lif_out", "--out", str(out))
    assert code == 0
    feat = load_tensor(out)
    assert feat.shape == (1, 8, 8, 8)
    from lifmixer.train import load_train_state

    model = load_train_state(d / "m.ckpt")[0]
    assert feat.min() >= model.stages[0].blocks[0].lif.vlif.v_th.value[0]
    np.save(tmp_path / "img.npy", img[0])
    code, _, _ = run(capsys, "export-features", "--checkpoint", str(d / "m.ckpt"), "--image",
                     str(tmp_path / "img.npy"), "--layer", "logits", "--out", str(tmp_path / "l.lift"))
    assert code == 0 and load_tensor(tmp_path / "l.lift").shape == (1, 3, 1, 1)


def test_export_unknown_layer_lists_names(capsys, trained, tmp_path):
    d, _ = trained
    code, _, err = run(capsys, "export-features", "--checkpoint", str(d / "m.ckpt"), "--image", "x",
                       "--layer", "foo", "--out", str(tmp_path / "f.lift"))
    assert code == 2 and "stage0.block0.lif_out" in err and "foo" in err


def test_bench(capsys):
    code, out, _ = run(capsys, "bench", "--shape", "1x4x8x8", "--groups", "2,8", "--repeats", "1",
                       "--backend", "python")
    assert code == 0
    rows = [ln.split() for ln in out.splitlines() if ln.startswith("lif_forward")]
    assert len(rows) == 2 and all(r[3] == r[4] for r in rows)  # one repeat: p95 == median
    for op in ("lif_backward", "dwconv3x3", "lif_module"):
        assert run(capsys, "bench", "--op", op, "--shape", "1x4x8x8", "--repeats", "2")[0] == 0


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "lifmixer.cli", "count", "toy"], capture_output=True, text=True)
    assert r.returncode == 0 and "params" in r.stdout


@pytest.mark.skipif("native" not in available_backends(), reason="native extension not built")
def test_threads_flag_sets_pool(capsys, monkeypatch):
    from lifmixer import _lif_native

    assert run(capsys, "count", "toy", "--threads", "2")[0] == 0
    assert _lif_native.get_max_threads() == 2
    monkeypatch.setenv("LIFMIXER_THREADS", "1")
    assert run(capsys, "count", "toy")[0] == 0
    assert _lif_native.get_max_threads() == 1
