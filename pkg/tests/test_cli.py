
import numpy as np
import pytest

from xattn import cli, media
from xattn import metrics as mt
from xattn import targets as tg
from xattn.engine import load_tensor
from xattn.guidance import GuidanceScaleWarning
from xattn.runconfig import RunManifest

TINY_INI = """\
[data]
clips = 16
[denoiser]
frames = 2
height = 8
width = 8
model_width = 16
block_layout = down:4 down:2 mid:2 up:2 up:4
[optimizer]
batch_size = 4
warmup = 2
[train]
steps = 3
log_every = 1
"""

MOVE_SPEC = """\
prompt red circle moves left to right
token circle
frames 2
1 0.0 0.25 0.5 0.75
2 0.5 0.25 1.0 0.75
"""

GUIDE = ["--resolutions", "2,4", "--steps", "4"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY_INI)
    (root / "move.spec").write_text(MOVE_SPEC)
    assert cli.main(["train", "--config", str(root / "tiny.ini"), "--out", str(root / "train")]) == 0
    return root


@pytest.fixture(scope="module")
def ckpt(work):
    return str(work / "train" / "checkpoint.xatn")


def run(*argv):
    return cli.main([str(a) for a in argv])


# -------------------------------------------------------------------- train
def test_train_outputs(work):
    out = work / "train"
    for name in ("checkpoint.xatn", "config.ini", "loss_log.csv", "manifest.ini"):
        assert (out / name).is_file()
    lines = (out / "loss_log.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 4
    assert not (out / "partial.xatn").exists()
    m = RunManifest.load(out)
    assert m.command == "train" and {"denoiser", "schedule", "optimizer"} <= set(m.config)


def test_train_replay_same_checkpoint_digest(work):
    assert run("replay", "--manifest", work / "train", "--out", work / "train_replay") == 0
    a = RunManifest.load(work / "train").outputs["checkpoint.xatn"]
    assert RunManifest.load(work / "train_replay").outputs["checkpoint.xatn"] == a


def test_missing_config_exit_2(tmp_path):
    assert run("train", "--config", tmp_path / "none.ini", "--out", tmp_path / "o") == 2


def test_bad_config_exit_2(tmp_path):
    (tmp_path / "bad.ini").write_text("[train]\nsteps = lots\n")
    assert run("train", "--config", tmp_path / "bad.ini", "--out", tmp_path / "o") == 2


def test_unknown_command_and_missing_flag_exit_2(capsys):
    assert run("fly") == 2
    assert run("sample", "--prompt", "red circle") == 2


def test_runtime_failure_exit_3(tmp_path, monkeypatch):
    def boom(args):
        raise RuntimeError("disk on fire")

    parser = cli.build_parser()
    monkeypatch.setattr(cli, "build_parser", lambda: _rebind(parser, "sample", boom))
    assert run("sample", "--checkpoint", "x", "--prompt", "red", "--out", tmp_path) == 3


def _rebind(parser, name, func):
    sub = next(a for a in parser._actions if getattr(a, "choices", None) and name in a.choices)
    sub.choices[name].set_defaults(func=func)
    return parser


# ------------------------------------------------------------------- sample
def test_sample_outputs_and_determinism(work, ckpt):
    a, b = work / "s1", work / "s2"
    assert run("sample", "--checkpoint", ckpt, "--prompt", "red circle", "--seed", 4, "--steps", 4, "--out", a) == 0
    assert run("sample", "--checkpoint", ckpt, "--prompt", "red circle", "--seed", 4, "--steps", 4, "--out", b) == 0
    frames = sorted(p.name for p in (a / "frames").glob("frame_*.png"))
    assert len(frames) == 2 and (a / "frames" / "clip.gif").is_file()
    for name in frames:
        assert (a / "frames" / name).read_bytes() == (b / "frames" / name).read_bytes()


def test_sample_oov_prompt_exit_2(work, ckpt):
    assert run("sample", "--checkpoint", ckpt, "--prompt", "red burger", "--out", work / "oov") == 2


def test_sample_missing_checkpoint_exit_2(tmp_path):
    assert run("sample", "--checkpoint", tmp_path / "no.xatn", "--prompt", "red", "--out", tmp_path) == 2


def test_sample_replay(work, ckpt):
    out = work / "s_rep"
    run("sample", "--checkpoint", ckpt, "--prompt", "blue square", "--seed", 1, "--steps", 4, "--out", out)
    assert run("replay", "--manifest", out / "manifest.ini", "--out", work / "s_rep2") == 0


def test_replay_detects_tampering(work, ckpt):
    out = work / "s_tamper"
    run("sample", "--checkpoint", ckpt, "--prompt", "blue square", "--steps", 4, "--out", out)
    text = (out / "manifest.ini").read_text()
    m = RunManifest.from_text(text)
    key = next(iter(m.outputs))
    (out / "manifest.ini").write_text(text.replace(m.outputs[key], "0" * 64))
    assert run("replay", "--manifest", out, "--out", work / "s_tamper2") == 3


# --------------------------------------------------------------------- edit
@pytest.fixture(scope="module")
def edit_out(work, ckpt):
    out = work / "edit"
    assert run("edit", "--checkpoint", ckpt, "--spec", work / "move.spec", "--seed", 2, *GUIDE,
               "--out", out) == 0
    return out


def test_edit_outputs(edit_out):
    for name in ("guided", "unguided", "attention_guided", "attention_unguided"):
        assert (edit_out / name).is_dir()
    trace = (edit_out / "energy_trace.csv").read_text().splitlines()
    assert trace[0] == "step,pre,post" and [int(l.split(",")[0]) for l in trace[1:]] == [1, 2, 4]
    text = (edit_out / "metrics.txt").read_text()
    assert "[guided]" in text and "[unguided]" in text and "iou_gain" in text
    dumps = sorted((edit_out / "attention_guided").glob("*.xatn"))
    assert len(dumps) == 5
    assert load_tensor(dumps[0]).shape[:2] == (3, 2)


def test_edit_replay(work, edit_out):
    assert run("replay", "--manifest", edit_out, "--out", work / "edit_replay") == 0


def test_zero_eta_edit_matches_control(work, ckpt):
    out = work / "edit0"
    with pytest.warns(GuidanceScaleWarning, match="eta=0.0"):
        assert run("edit", "--checkpoint", ckpt, "--spec", work / "move.spec", "--seed", 2, *GUIDE,
                   "--eta", 0, "--out", out) == 0
    for p in (out / "guided").glob("frame_*.png"):
        assert p.read_bytes() == (out / "unguided" / p.name).read_bytes()
    assert "iou_gain = 0.000000" in (out / "metrics.txt").read_text()


def test_edit_resize_only_spec(work, ckpt):
    (work / "resize.spec").write_text("prompt red circle moves\ntoken circle\nframes 2\nresize 1.4\n")
    out = work / "edit_resize"
    assert run("edit", "--checkpoint", ckpt, "--spec", work / "resize.spec", *GUIDE, "--out", out) == 0
    fitted = tg.load_spec(out / "target.spec")
    assert len(fitted.keyframes) == 2 and fitted.resize_factor == 1.4


@pytest.mark.parametrize("extra, spec_text", [
    ([], "prompt red circle\ntoken square\n1 0 0 1 1\n"),
    ([], "prompt red circle\ntoken circle\nframes 3\n1 0 0 1 1\n"),
    (["--blocks", "down,up"], MOVE_SPEC),
    (["--resolutions", "16"], MOVE_SPEC),
])
def test_edit_usage_errors(work, ckpt, extra, spec_text):
    p = work / "bad.spec"
    p.write_text(spec_text)
    assert run("edit", "--checkpoint", ckpt, "--spec", p, "--steps", 4, "--resolutions", "2,4", *extra,
               "--out", work / "edit_bad") == 2


def test_edit_without_mid_needs_flag(work, ckpt):
    args = ["edit", "--checkpoint", ckpt, "--spec", work / "move.spec", "--resolutions", "2,4",
            "--steps", 4, "--blocks", "down,up", "--out", work / "nomid"]
    assert run(*args) == 2
    assert run(*args, "--allow-no-mid") == 0


# --------------------------------------------------------------------- swap
def test_swap_outputs(work, ckpt):
    out = work / "swap"
    assert run("swap", "--checkpoint", ckpt, "--prompt", "red circle moves", "--target-prompt",
               "red square moves", "--steps", 4, "--out", out) == 0
    for name in ("source", "target", "swapped", "side_by_side"):
        assert len(list((out / name).glob("frame_*.png"))) == 2
    assert media.read_frames(out / "side_by_side").shape[-1] == 24
    assert run("replay", "--manifest", out, "--out", work / "swap_rep") == 0


def test_swap_identical_prompts_is_plain_sample(work, ckpt):
    out = work / "swap_same"
    assert run("swap", "--checkpoint", ckpt, "--prompt", "red circle", "--target-prompt", "red circle",
               "--steps", 4, "--out", out) == 0
    for p in (out / "source").glob("frame_*.png"):
        assert p.read_bytes() == (out / "swapped" / p.name).read_bytes()


def test_swap_multi_token_rejected(work, ckpt, capsys):
    assert run("swap", "--checkpoint", ckpt, "--prompt", "red circle moves", "--target-prompt",
               "blue square stays", "--out", work / "swap_bad") == 2
    assert "exactly one token" in capsys.readouterr().err


# ------------------------------------------------------------------ inspect
def test_inspect_outputs_and_average(work, ckpt):
    out = work / "inspect"
    assert run("inspect", "--checkpoint", ckpt, "--prompt", "green triangle moves", "--step", 2,
               "--steps", 4, "--resolutions", 4, "--out", out) == 0
    pngs = list(out.glob("token*_frame*.png"))
    assert len(pngs) == 3 * 2
    avg = load_tensor(out / "averaged.xatn").data
    recs = [load_tensor(p).data for p in sorted(out.glob("record_L*.xatn"))]
    assert len(recs) == 2 and avg.shape == (3, 2, 4, 4)
    for k in range(3):
        for f in range(2):
            for i in range(4):
                for j in range(4):
                    assert avg[k, f, i, j] == pytest.approx(sum(float(r[f, i, j, k]) for r in recs) / len(recs),
                                                            rel=1e-6)


def test_inspect_bad_step_exit_2(work, ckpt):
    assert run("inspect", "--checkpoint", ckpt, "--prompt", "red", "--step", 9, "--steps", 4,
               "--resolutions", 4, "--out", work / "insp_bad") == 2


# ------------------------------------------------------------------ metrics
def test_metrics_command(work, edit_out, capsys):
    out = work / "metrics"
    assert run("metrics", "--frames", edit_out / "guided", "--spec", edit_out / "target.spec",
               "--attention", edit_out / "attention_guided", "--out", out) == 0
    printed = capsys.readouterr().out
    assert "mean_iou" in printed and (out / "metrics.txt").read_text() == printed
    # same inputs as the edit's own scoring
    guided = (edit_out / "metrics.txt").read_text().split("[unguided]")[0]
    line = next(l for l in printed.splitlines() if l.startswith("mean_iou"))
    assert line in guided


def test_metrics_frame_mismatch_exit_2(work, edit_out, tmp_path):
    spec = tmp_path / "t.spec"
    spec.write_text(MOVE_SPEC.replace("frames 2", "frames 3"))
    assert run("metrics", "--frames", edit_out / "guided", "--spec", spec, "--out", tmp_path / "m") == 2


def test_compute_metrics_self_iou(tmp_path):
    frames = np.full((2, 3, 8, 8), -1.0)
    frames[:, 0, 2:6, 2:6] = 1.0
    media.export_media(frames, tmp_path / "f")
    spec = tg.parse_spec("prompt red square\ntoken square\nframes 2\n1 0.25 0.25 0.75 0.75\n")
    rep = cli.compute_metrics(tmp_path / "f", spec)
    assert rep.centroid_error == pytest.approx(0.0)
    assert rep.object_presence == 1.0
    assert mt.iou(spec.build_track(8).masks[0], frames[0, 0] > 0) == 1.0
