import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from cogbeam import cli, metrics
from cogbeam.tensorfile import read_tensor, write_tensor


def write_config(tmp_path, name="cfg.json", **overrides):
    cfg = {
        "seed": 11,
        "scene": {
            "condition": "custom",
            "t60_s": 0.15,
            "target_input_fwssnr_db": None,
            "noise_gain": 0.05,
            "n_mics": 3,
            "duration_s": 6.0,
        },
        "beamformer_type": "wMPDR",
        "beamformer": {"iterations": 2},
        "aad": {"trial_seconds": 1.5, "snr_db": 40.0},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full simulate -> enhance -> decode -> evaluate run."""
    root = tmp_path_factory.mktemp("pipe")
    cfg_path = write_config(root)
    cfg = cli.load_config(cfg_path)
    cli.cmd_simulate(cfg, root / "scene")
    cli.cmd_enhance(cfg, root / "scene", root / "enh")
    cli.cmd_decode(cfg, root / "scene", root / "enh", root / "dec")
    report = cli.cmd_evaluate(cfg, root / "scene", root / "enh", root / "dec", root / "eval")
    return root, cfg, report


class TestConfig:
    def test_seed_mandatory(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{}")
        with pytest.raises(cli.ConfigError, match="seed"):
            cli.load_config(path)

    def test_unknown_beamformer(self, tmp_path):
        path = write_config(tmp_path, beamformer_type="GEV")
        with pytest.raises(cli.ConfigError, match="beamformer_type"):
            cli.load_config(path)

    def test_missing_mask_file(self, tmp_path):
        path = write_config(tmp_path, masks={"source": "file", "path": "/nope.cbtf"})
        with pytest.raises(cli.ConfigError, match="mask file"):
            cli.load_config(path)

    def test_unknown_section_key(self, tmp_path):
        path = write_config(tmp_path, scene={"warp": 1})
        with pytest.raises(cli.ConfigError, match="scene"):
            cli.load_config(path)


class TestSimulate:
    def test_seed_repeat_byte_identical(self, tmp_path):
        cfg = cli.load_config(write_config(tmp_path))
        cli.cmd_simulate(cfg, tmp_path / "a")
        cli.cmd_simulate(cfg, tmp_path / "b")
        for name in [
            "mics.wav",
            "components_reverberant.cbtf",
            "components_anechoic.cbtf",
            "noise.cbtf",
            "metadata.json",
        ]:
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes(), name

    def test_zero_noise_config(self, tmp_path):
        cfg = cli.load_config(write_config(tmp_path, scene={"noise_gain": 0.0}))
        cli.cmd_simulate(cfg, tmp_path / "scene")
        noise = read_tensor(tmp_path / "scene" / "noise.cbtf")
        assert not np.any(noise)

    def test_additivity_of_stored_components(self, pipeline):
        root, _, _ = pipeline
        mics, _ = cli.read_wav(root / "scene" / "mics.wav")
        comps = read_tensor(root / "scene" / "components_reverberant.cbtf")
        noise = read_tensor(root / "scene" / "noise.cbtf")
        # float32 WAV quantizes; components are stored at full precision
        np.testing.assert_allclose(
            mics, comps.sum(axis=0) + noise, atol=1e-6 * np.abs(mics).max()
        )

    def test_calibrated_condition_hits_target(self, tmp_path):
        cfg = cli.load_config(
            write_config(
                tmp_path,
                scene={
                    "condition": "reverberant-noisy",
                    "t60_s": 0.15,
                    "target_input_fwssnr_db": None,
                    "duration_s": 6.0,
                    "noise_gain": 1.0,
                },
            )
        )
        meta = cli.cmd_simulate(cfg, tmp_path / "scene")
        assert meta["mean_input_fwssnr_db"] == pytest.approx(0.5, abs=0.1)


class TestEnhance:
    def test_outputs_exist_with_diagnostics(self, pipeline):
        root, _, _ = pipeline
        assert (root / "enh" / "speaker0.wav").exists()
        assert (root / "enh" / "speaker1.wav").exists()
        diag = json.loads((root / "enh" / "diagnostics.json").read_text())
        assert diag["speaker0"]["max_constraint_residual"] <= 1e-8

    def test_wlcmp_single_speaker_equals_wmpdr_bitwise(self, tmp_path):
        cfg_w = cli.load_config(
            write_config(tmp_path, "w.json", scene={"n_speakers": 1}, beamformer_type="wMPDR")
        )
        cfg_l = cli.load_config(
            write_config(tmp_path, "l.json", scene={"n_speakers": 1}, beamformer_type="wLCMP")
        )
        cli.cmd_simulate(cfg_w, tmp_path / "scene")
        cli.cmd_enhance(cfg_w, tmp_path / "scene", tmp_path / "em")
        cli.cmd_enhance(cfg_l, tmp_path / "scene", tmp_path / "el")
        assert (tmp_path / "em" / "speaker0.wav").read_bytes() == (
            tmp_path / "el" / "speaker0.wav"
        ).read_bytes()

    def test_mask_file_route_matches_oracle_route(self, pipeline, tmp_path):
        from cogbeam import masks as masks_mod
        from cogbeam import stft as stft_mod

        root, cfg, _ = pipeline
        rendered, meta = cli._load_scene_dir(root / "scene")
        mix = stft_mod.analyze(rendered.mics, cfg.stft)
        mask_set = cli._mask_set(cfg, rendered, mix)
        mask_path = tmp_path / "masks.cbtf"
        masks_mod.store_masks(mask_set, mask_path)

        cfg_file = cli.load_config(
            write_config(tmp_path, masks={"source": "file", "path": str(mask_path)})
        )
        cli.cmd_enhance(cfg_file, root / "scene", tmp_path / "enh_file")
        assert (tmp_path / "enh_file" / "speaker0.wav").read_bytes() == (
            root / "enh" / "speaker0.wav"
        ).read_bytes()

    @pytest.mark.parametrize("kind", ["MPDR", "LCMP", "MVDR", "LCMV"])
    def test_conventional_types_run(self, pipeline, tmp_path, kind):
        root, _, _ = pipeline
        cfg = cli.load_config(write_config(tmp_path, beamformer_type=kind))
        out = tmp_path / f"enh_{kind}"
        cli.cmd_enhance(cfg, root / "scene", out)
        sig, _ = cli.read_wav(out / "speaker0.wav")
        assert np.all(np.isfinite(sig))


class TestDecode:
    def test_record_count_matches_trials(self, pipeline):
        root, cfg, _ = pipeline
        records = [
            json.loads(line)
            for line in (root / "dec" / "trials.jsonl").read_text().splitlines()
        ]
        enhanced, _ = cli.read_wav(root / "enh" / "speaker0.wav")
        per = int(cfg.aad.trial_seconds * cfg.aad.rate)
        env_len = int(np.ceil(enhanced.shape[1] * cfg.aad.rate / 16000))
        assert len(records) == env_len // per

    def test_high_snr_selects_attended(self, pipeline):
        root, _, _ = pipeline
        records = [
            json.loads(line)
            for line in (root / "dec" / "trials.jsonl").read_text().splitlines()
        ]
        correct = [r["selected"] == r["attended"] for r in records]
        assert sum(correct) >= 0.75 * len(correct)

    def test_trial_spans_thirty_seconds(self):
        spans = cli._trial_spans(1200 * 64, 64, 30.0)
        assert len(spans) == 40


class TestEvaluate:
    def test_report_fields(self, pipeline):
        _, _, report = pipeline
        assert report["oracle_aad_accuracy_pct"] == 100.0
        assert report["n_trials"] >= 3
        assert np.isfinite(report["delta_fwssnr_est_aad_db"])
        assert report["published_chance_bounds_pct"] == {40: 61.39, 20: 66.19}

    def test_report_round_trips_through_json(self, pipeline):
        root, _, report = pipeline
        loaded = json.loads((root / "eval" / "report.json").read_text())
        dumped = json.loads(json.dumps(loaded))
        assert dumped == loaded
        assert loaded["n_trials"] == report["n_trials"]

    def test_tables_written(self, pipeline):
        root, _, report = pipeline
        table = (root / "eval" / "tables" / "trials.tsv").read_text().splitlines()
        assert table[0].startswith("trial\t")
        assert len(table) == report["n_trials"] + 1

    def test_passthrough_outputs_give_zero_delta(self, tmp_path):
        cfg = cli.load_config(
            write_config(tmp_path, scene={"n_mics": 1, "noise_gain": 0.05})
        )
        cli.cmd_simulate(cfg, tmp_path / "scene")
        mics, rate = cli.read_wav(tmp_path / "scene" / "mics.wav")
        out = tmp_path / "enh"
        out.mkdir()
        for i in range(2):  # both "outputs" are the lone microphone signal
            cli.write_wav(out / f"speaker{i}.wav", mics[0], rate)
        cli.cmd_decode(cfg, tmp_path / "scene", out, tmp_path / "dec")
        report = cli.cmd_evaluate(
            cfg, tmp_path / "scene", out, tmp_path / "dec", tmp_path / "eval"
        )
        assert report["delta_fwssnr_est_aad_db"] == 0.0
        assert all(t["tie"] for t in report["trials"])
        assert report["aad_accuracy_pct"] == 0.0  # ties count as incorrect


class TestMainEntry:
    def test_cli_error_record_on_failure(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{}")
        proc = subprocess.run(
            [sys.executable, "-m", "cogbeam.cli", "simulate", "--config", str(bad), "--out", str(tmp_path / "o")],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 1
        record = json.loads(proc.stderr.strip().splitlines()[-1])
        assert record["error"] == "ConfigError"

    def test_cli_simulate_success(self, tmp_path):
        cfg_path = write_config(tmp_path)
        proc = subprocess.run(
            [
                sys.executable,
                "-m",
                "cogbeam.cli",
                "simulate",
                "--config",
                str(cfg_path),
                "--out",
                str(tmp_path / "scene"),
            ],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "scene" / "metadata.json").exists()

    def test_seed_override(self, tmp_path):
        cfg_path = write_config(tmp_path)
        proc = subprocess.run(
            [
                sys.executable, "-m", "cogbeam.cli", "simulate",
                "--config", str(cfg_path), "--out", str(tmp_path / "s2"),
                "--seed", "99",
            ],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        meta = json.loads((tmp_path / "s2" / "metadata.json").read_text())
        assert meta["seed"] == 99
