import struct
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lesionseg import segio
from lesionseg.models import ModelConfig
from lesionseg.nn import init_params
from lesionseg.segio import (
    ConfigError,
    FormatError,
    NotSEG1Error,
    ResultRow,
    RunConfig,
    TruncatedFileError,
    UnsupportedVersionError,
    decode_slice,
    encode_slice,
    parse_config_text,
)
from lesionseg.synthdata import SliceSample


def sample(h=4, w=3, seed=0, phenotype="contusion"):
    rng = np.random.default_rng(seed)
    return SliceSample(
        image=rng.uniform(size=(1, 1, h, w)).astype(np.float32),
        mask=(rng.uniform(size=(1, 1, h, w)) < 0.3).astype(np.uint8),
        phenotype=phenotype,
        case_id=7,
        slice_idx=3,
    )


# -- SEG1 --------------------------------------------------------------------------


def test_seg1_header_bytes():
    buf = encode_slice(sample())
    assert len(buf) == 24 + 5 * 12
    assert buf[:24] == (b"SEG1" + b"\x01\x00" + b"\x01\x00" + b"\x07\x00\x00\x00"
                        + b"\x03\x00\x00\x00" + b"\x04\x00\x00\x00" + b"\x03\x00\x00\x00")


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1),
       st.sampled_from(["iph", "contusion", "extra_axial"]))
def test_seg1_round_trip(h, w, seed, phenotype):
    s = sample(h, w, seed, phenotype)
    t = decode_slice(encode_slice(s))
    assert np.array_equal(t.image, s.image) and t.image.dtype == np.float32
    assert np.array_equal(t.mask, s.mask) and t.mask.dtype == np.uint8
    assert (t.phenotype, t.case_id, t.slice_idx) == (phenotype, 7, 3)


def test_seg1_file_round_trip(tmp_path):
    s = sample()
    segio.write_slice(tmp_path / "a.seg1", s)
    assert np.array_equal(segio.read_slice(tmp_path / "a.seg1").image, s.image)


def test_seg1_errors_are_distinct():
    buf = encode_slice(sample())
    with pytest.raises(NotSEG1Error, match="not a SEG1 file"):
        decode_slice(b"P5\n" + buf)
    with pytest.raises(NotSEG1Error):
        decode_slice(b"")
    bad_version = buf[:4] + struct.pack("<H", 2) + buf[6:]
    with pytest.raises(UnsupportedVersionError, match="version 2"):
        decode_slice(bad_version)
    with pytest.raises(TruncatedFileError):
        decode_slice(buf[:-1])
    with pytest.raises(TruncatedFileError):
        decode_slice(buf[:10])
    with pytest.raises(FormatError, match="trailing"):
        decode_slice(buf + b"\x00")
    bad_pheno = buf[:6] + struct.pack("<H", 9) + buf[8:]
    with pytest.raises(FormatError, match="phenotype"):
        decode_slice(bad_pheno)
    for cls in (NotSEG1Error, UnsupportedVersionError, TruncatedFileError):
        assert issubclass(cls, FormatError)


def test_seg1_rejects_bad_shapes():
    s = sample()
    s.mask = s.mask[..., :2]
    with pytest.raises(ValueError):
        encode_slice(s)


# -- parameter dumps ---------------------------------------------------------------


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_params_round_trip(dtype, tmp_path):
    cfg = ModelConfig("unetpp", 2, 3)
    p = init_params(cfg, 4, dtype=dtype)
    for e in p:
        e.bias[...] = 0.125
    segio.write_params(tmp_path / "p.lsp", p, cfg)
    q, cfg2 = segio.read_params(tmp_path / "p.lsp")
    assert cfg2 == cfg
    assert q.dtype == dtype
    assert q.equals(p)


def test_params_corrupt():
    cfg = ModelConfig("unet", 1, 2)
    buf = segio.encode_params(init_params(cfg, 0), cfg)
    with pytest.raises(FormatError):
        segio.decode_params(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        segio.decode_params(buf[:-3])


# -- result tables -----------------------------------------------------------------


def rows24():
    rows = []
    for a in ("unet", "unetpp"):
        for i, l in enumerate(("bce", "dice", "focal", "focal_tversky")):
            for s in range(3):
                rows.append(ResultRow(a, l, s, 0.8 + 0.01 * i + 0.001 * s + (0.05 if a == "unetpp" else 0),
                                      0.9, 0.99, 30, 1000))
    return rows


def test_fmt4():
    assert segio.fmt4(0.94236) == "0.9424"
    assert segio.fmt4(1.0) == "1.0000"
    assert segio.fmt4(float("nan")) == "nan"


def test_results_csv_and_parse_back(tmp_path):
    rows = rows24()
    path, summ = segio.write_results(tmp_path / "results.csv", rows, "title here")
    text = path.read_text()
    lines = text.splitlines()
    assert lines[0] == "architecture,loss,seed,dice,sensitivity,specificity,epochs,params"
    assert lines[1] == "unet,bce,0,0.8000,0.9000,0.9900,30,1000"
    assert len(lines) == 25
    back = segio.read_results(path)
    assert [(r.architecture, r.loss, r.seed) for r in back] == [(r.architecture, r.loss, r.seed) for r in rows]
    assert all(abs(a.dice - b.dice) < 5e-5 for a, b in zip(back, rows))
    assert summ.name == "results_summary.txt"


def test_summary_table():
    text = segio.summary_text(rows24(), "Phantom iph")
    lines = text.splitlines()
    assert lines[0] == "Phantom iph"
    body = lines[3:]
    assert len(body) == 8
    assert sum("**" in ln for ln in body) == 1
    best = [ln for ln in body if "**" in ln][0]
    assert best.startswith("UNet++ 2D") and "Focal Tversky Loss" in best and "**0.8810**" in best


def test_summary_marks_failed_seeds():
    rows = rows24()
    rows[0].dice = rows[0].sensitivity = rows[0].specificity = float("nan")
    assert rows[0].failed
    (first, *_rest) = segio.summarize_rows(rows)
    assert first[2] == pytest.approx((0.801 + 0.802) / 2)
    assert first[5:] == (2, 1)
    assert "2 (1 failed)" in segio.summary_text(rows)
    csv_line = segio.results_csv(rows).splitlines()[1]
    assert csv_line == "unet,bce,0,nan,nan,nan,30,1000"


def test_bad_results_header(tmp_path):
    (tmp_path / "r.csv").write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        segio.read_results(tmp_path / "r.csv")


# -- configuration -----------------------------------------------------------------


def test_empty_config_is_defaults():
    assert parse_config_text("") == RunConfig()
    assert parse_config_text("# only a comment\n\n") == RunConfig()
    assert segio.parse_config(None) == RunConfig()


def test_default_reference_round_trips():
    assert parse_config_text(segio.default_config_text()) == RunConfig()
    text = segio.default_config_text()
    for sec in segio.SECTIONS:
        assert f"[{sec}]" in text


def test_config_round_trip_nondefault():
    cfg = parse_config_text(
        "[model]\narch = unetpp\ndepth = 2\n[train]\nclip_norm = none\nepochs = 3\n"
        "[grid]\nseeds = 4, 5\nlosses = dice\n[loss]\ngamma_ftl = 1.5\n"
    )
    assert cfg.model.arch == "unetpp" and cfg.train.clip_norm is None
    assert cfg.grid.seeds == (4, 5) and cfg.grid.losses == ("dice",)
    assert parse_config_text(segio.config_to_text(cfg)) == cfg


def test_gamma_ftl_out_of_range_cites_range_and_line():
    with pytest.raises(ConfigError, match=r"\[1, 3\]") as exc:
        parse_config_text("[loss]\nkind = focal_tversky\ngamma_ftl = 5\n")
    assert exc.value.line == 3
    assert str(exc.value).startswith("line 3:")


def test_duplicate_key_warns_last_wins():
    with pytest.warns(UserWarning, match="duplicate key train.epochs"):
        cfg = parse_config_text("[train]\nepochs = 3\nepochs = 7\n")
    assert cfg.train.epochs == 7


@pytest.mark.parametrize(
    "text, line, match",
    [
        ("[train]\nlr = 0.1\n", 2, "unknown key 'lr'"),
        ("\n[optim]\n", 2, "unknown section"),
        ("epochs = 3\n", 1, "outside"),
        ("[train]\nepochs\n", 2, "key = value"),
        ("[train]\nepochs = many\n", 2, "epochs"),
        ("[model]\n[train\n", 2, "malformed"),
        ("[grid]\narchitectures = unet, vnet\n", 2, "vnet"),
    ],
)
def test_config_errors_have_line_numbers(text, line, match):
    with pytest.raises(ConfigError, match=match) as exc:
        parse_config_text(text)
    assert exc.value.line == line


def test_config_cross_check_divisibility():
    with pytest.raises(ConfigError, match="divisible"):
        parse_config_text("[data]\nh = 36\n[model]\ndepth = 3\n")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        segio.parse_config(tmp_path / "nope.cfg")


def test_no_warning_for_clean_config():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        parse_config_text(segio.default_config_text())


# -- images and files --------------------------------------------------------------


def test_pgm_and_triptych(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    t = segio.triptych(img, np.ones((3, 4)), np.zeros((3, 4)))
    assert t.shape == (3, 16)
    (tmp_path / "t.pgm").write_bytes(segio.pgm_bytes(t))
    back = segio.read_pgm(tmp_path / "t.pgm")
    assert back.shape == (3, 16)
    assert back[0, 0] == 0 and back[2, 3] == 255 and back[0, 4] == 255 and back[0, 15] == 0


def test_ensure_empty_dir(tmp_path):
    d = tmp_path / "out"
    segio.ensure_empty_dir(d, False)
    (d / "x").write_text("1")
    with pytest.raises(FileExistsError, match="--force"):
        segio.ensure_empty_dir(d, False)
    segio.ensure_empty_dir(d, True)
    with pytest.raises(FileExistsError):
        segio.ensure_empty_dir(d / "x", True)


def test_atomic_write(tmp_path):
    segio.atomic_write(tmp_path / "a.txt", "hi")
    assert (tmp_path / "a.txt").read_text() == "hi"
    assert not (tmp_path / "a.txt.tmp").exists()
