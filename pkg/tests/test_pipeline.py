import http.server
import math
import threading

import numpy as np
import pytest

from hepatoscan.anatomy import default_skeleton
from hepatoscan.io import FormatError, volume_bytes, write_mask, write_volume
from hepatoscan.phantom import PhantomSpec, generate
from hepatoscan.pipeline import (
    ConfigError,
    ManifestEntry,
    PipelineConfig,
    SourceError,
    default_atlas,
    evaluate,
    list_studies,
    load_config,
    parse_config_text,
    parse_overrides,
    parse_report,
    read_manifest,
    run_batch,
    run_study,
    truth_mask_path,
    write_manifest,
)
from hepatoscan.volume import BinaryMask, CtVolume, VoxelGrid


@pytest.fixture(scope="module")
def atlas():
    return default_atlas()


@pytest.fixture(scope="module")
def skel():
    return default_skeleton()


@pytest.fixture(scope="module")
def body():
    return generate(PhantomSpec(kind="body", liver_hu=45.0, noise_sigma_hu=10.0, seed=31))


@pytest.fixture(scope="module")
def body_outcome(body, atlas, skel):
    return run_study(body[0], atlas, skel, PipelineConfig(), "b31")


class TestConfig:
    def test_parse_text(self):
        cfg = parse_config_text("# comment\ntau = 0.6\n\nflip_z = yes  # trailing\nworkers=3\nsource = /data/x\n")
        assert cfg.tau == 0.6 and cfg.flip_z is True and cfg.workers == 3 and cfg.source == "/data/x"
        assert cfg.scale_min == PipelineConfig().scale_min

    def test_overrides_on_base(self):
        base = PipelineConfig(tau=0.7)
        cfg = parse_overrides({"pre_smooth_mm": "1.5"}, base)
        assert cfg.tau == 0.7 and cfg.pre_smooth_mm == 1.5

    @pytest.mark.parametrize(
        "text",
        ["nonsense = 1", "tau = high", "tau = 1.5", "workers = 0", "flip_z = maybe", "just words", "scale_min = 2.0"],
    )
    def test_bad_config(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_load_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("visibility_floor = 0.5\n")
        assert load_config(p).visibility_floor == 0.5
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.cfg")

    def test_search_config(self):
        sc = PipelineConfig(scale_min=0.9, scale_max=1.1).search_config()
        assert min(sc.scales()) == pytest.approx(0.9) and max(sc.scales()) == pytest.approx(1.1)


class TestRunStudy:
    def test_positive(self, body, body_outcome):
        vol, truth = body
        out = body_outcome
        assert out.status == "ok" and out.detected
        assert out.report_text.startswith("LIVER REPORT\ndetected: yes\n")
        assert abs(out.report.dominant.mean_hu - 45.0) <= 2.0
        assert out.mask.grid == vol.grid
        inter = (out.mask.bits & truth.liver_mask.bits).sum()
        assert 2 * inter / (out.mask.bits.sum() + truth.liver_mask.bits.sum()) >= 0.85

    def test_timings(self, body_outcome):
        t = body_outcome.timings_ms
        for stage in ("gate", "search", "densitometry", "refine", "remeasure", "render"):
            assert 0 <= t[stage] <= t["total"]
        assert sum(v for k, v in t.items() if k != "total") <= t["total"] + 1e-6

    def test_no_liver(self, atlas, skel):
        vol, _ = generate(PhantomSpec(kind="head", seed=31))
        out = run_study(vol, atlas, skel)
        assert out.status == "no-liver" and not out.detected
        assert out.report_text == "LIVER REPORT\ndetected: no\nbest_score: -1.000\n"
        assert "search" not in out.timings_ms
        assert not out.mask.bits.any()

    def test_not_found_above_tau(self, body, body_outcome, atlas, skel):
        out = run_study(body[0], atlas, skel, PipelineConfig(tau=0.99))
        assert out.status == "not-found" and not out.mask.bits.any()
        assert out.score == pytest.approx(body_outcome.score)
        rep = parse_report(out.report_text)
        assert not rep.detected and rep.score == round(out.score, 3) and math.isnan(rep.dominant_mean_hu)

    def test_flip_z(self, body, body_outcome, atlas, skel):
        vol = body[0]
        flipped = CtVolume(vol.grid, vol.values[::-1])
        out = run_study(flipped, atlas, skel, PipelineConfig(flip_z=True))
        assert out.status == body_outcome.status
        assert out.report_text == body_outcome.report_text
        assert np.array_equal(out.mask.bits, body_outcome.mask.bits[::-1])

    def test_pre_smooth(self, body, atlas, skel):
        out = run_study(body[0], atlas, skel, PipelineConfig(pre_smooth_mm=1.0))
        assert out.detected and "pre_smooth" in out.timings_ms
        assert abs(out.report.dominant.mean_hu - 45.0) <= 2.0


def test_parse_report_roundtrip(body_outcome):
    rep = parse_report(body_outcome.report_text)
    assert rep.detected
    assert rep.score == round(body_outcome.score, 3)
    assert rep.dominant_mean_hu == round(body_outcome.report.dominant.mean_hu, 1)
    with pytest.raises(FormatError):
        parse_report("hello\n")


class TestBatch:
    def test_directory(self, tmp_path, body, atlas, skel):
        src = tmp_path / "src"
        src.mkdir()
        write_volume(body[0], src / "a.mvol")
        write_volume(generate(PhantomSpec(kind="limb", seed=2))[0], src / "b.mvol")
        (src / "c.mvol").write_bytes(b"not a volume")
        write_mask(body[1].liver_mask, src / "a.truth.mask.mvol")  # masks are not studies
        assert list_studies(str(src)) == ["a", "b", "c"]
        out = tmp_path / "out"
        s = run_batch(str(src), PipelineConfig(), out, atlas, skel)
        c = s.counts()
        assert (c["ok"], c["no-liver"], c["error"]) == (1, 1, 1)
        text = (out / "batch_summary.txt").read_text()
        assert text == s.render()
        assert "studies = 3\n" in text and "status_no_liver = 1\n" in text
        assert (out / "a.report.txt").is_file() and (out / "a.mask.mvol").is_file()
        assert (out / "b.report.txt").read_text().startswith("LIVER REPORT\ndetected: no")
        assert not (out / "c.report.txt").exists()

    def test_missing_source(self, tmp_path):
        with pytest.raises(SourceError):
            run_batch(str(tmp_path / "nowhere"), PipelineConfig(), tmp_path / "out")

    def test_http_source(self, tmp_path, atlas, skel):
        files = {
            "h1": volume_bytes(generate(PhantomSpec(kind="head", seed=3))[0]),
            "l1": volume_bytes(generate(PhantomSpec(kind="limb", seed=4))[0]),
        }
        listing = "h1\nl1\ngone\n".encode()

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_GET(self):
                if self.path == "/studies":
                    body = listing
                elif self.path.startswith("/studies/") and self.path[9:-5] in files:
                    body = files[self.path[9:-5]]
                else:
                    self.send_error(404)
                    return
                self.send_response(200)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *a):
                pass

        srv = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        th = threading.Thread(target=srv.serve_forever, daemon=True)
        th.start()
        try:
            url = f"http://127.0.0.1:{srv.server_address[1]}"
            assert list_studies(url) == ["h1", "l1", "gone"]
            s = run_batch(url, PipelineConfig(), tmp_path / "out", atlas, skel)
        finally:
            srv.shutdown()
            srv.server_close()
        c = s.counts()
        assert (c["no-liver"], c["error"]) == (2, 1)
        assert {r[0] for r in s.results if r[1] == "error"} == {"gone"}
        with pytest.raises(SourceError):
            list_studies(url)  # server is down now


def _grid():
    return VoxelGrid((4, 1, 1), (1.0, 1.0, 1.0))


def _mask(bits):
    return BinaryMask(_grid(), np.array(bits, bool).reshape(1, 1, 4))


def _report(detected, score, mean=None):
    if not detected:
        return f"LIVER REPORT\ndetected: no\nbest_score: {score:.3f}\n"
    return (
        "LIVER REPORT\ndetected: yes\n"
        f"template: I-a type: I score: {score:.3f}\n"
        "visible_fraction: 1.00\ntotal_volume_ml: 1.0\nmodes: 1\n"
        f"mode 1: mean_hu {mean:.1f} std_hu 1.0 volume_ml 1.0 fraction 1.00\ndominant_mode: 1\n"
    )


def test_evaluate_hand_fixture(tmp_path):
    data, outs = tmp_path / "data", tmp_path / "outs"
    data.mkdir()
    outs.mkdir()
    entries = [
        ManifestEntry("p1", "body", True, 50.0, "p1.mvol"),
        ManifestEntry("p2", "chest_crop", True, 30.0, "p2.mvol"),
        ManifestEntry("n1", "head", False, float("nan"), "n1.mvol"),
        ManifestEntry("n2", "limb", False, float("nan"), "n2.mvol"),
        ManifestEntry("m1", "body", True, 10.0, "m1.mvol"),  # no outputs: skipped
    ]
    write_manifest(entries, data / "manifest.txt")
    assert read_manifest(data / "manifest.txt")[:2] == entries[:2]
    write_mask(_mask([1, 1, 0, 0]), truth_mask_path(data / "p1.mvol"))
    write_mask(_mask([1, 1, 0, 0]), truth_mask_path(data / "p2.mvol"))
    write_mask(_mask([1, 1, 0, 0]), outs / "p1.mask.mvol")
    write_mask(_mask([0, 1, 1, 0]), outs / "p2.mask.mvol")
    (outs / "p1.report.txt").write_text(_report(True, 0.9, 52.0))
    (outs / "p2.report.txt").write_text(_report(True, 0.6, 28.0))
    (outs / "n1.report.txt").write_text(_report(False, 0.7))
    (outs / "n2.report.txt").write_text(_report(False, -1.0))
    s = evaluate(data / "manifest.txt", outs)
    assert (s.n_studies, s.n_skipped) == (4, 1)
    assert s.sensitivity == 1.0 and s.specificity == 1.0
    # pairs (pos, neg): 0.9 beats both, 0.6 beats only -1
    assert s.auc == 0.75
    assert s.dice_mean == pytest.approx(0.75)
    assert s.density_err_std_hu == pytest.approx(2.0)
    assert s.density_err_p95_hu == 2.0 and s.density_err_max_hu == 2.0


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("a body 1 50\n")
    with pytest.raises(FormatError):
        read_manifest(p)
    p.write_text("a body perhaps 50 a.mvol\n")
    with pytest.raises(FormatError):
        read_manifest(p)


def test_manifest_nan_roundtrip(tmp_path):
    e = [ManifestEntry("x", "head", False, float("nan"), "x.mvol")]
    write_manifest(e, tmp_path / "m.txt")
    back = read_manifest(tmp_path / "m.txt")[0]
    assert back.study_id == "x" and not back.liver_present and math.isnan(back.expected_mean_hu)
