"""Command-line pipeline: simulate -> enhance -> decode -> evaluate.

Configuration is a single JSON file (documented in the README); every
command is deterministic given (config, seed). Artifacts cross stage
boundaries as float32 WAV, CBTF tensors and JSON records, so each stage can
also be driven by externally produced files.
"""

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile

from . import aad, beamform, masks, metrics, scene, stft
from .beamform import ConvBeamformerConfig
from .metrics import FwssnrConfig
from .stft import StftConfig
from .tensorfile import read_tensor, write_tensor

BEAMFORMER_TYPES = ("wMPDR", "wLCMP", "MPDR", "LCMP", "MVDR", "LCMV")
CONDITION_PRESETS = {
    # (t60 seconds, target input fwSSNR dB)
    "anechoic-noisy": (0.0, 2.9),
    "reverberant": (0.5, 3.5),
    "reverberant-noisy": (0.5, 0.5),
}


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    condition: str = "reverberant-noisy"
    n_speakers: int = 2
    n_mics: int = 4
    duration_s: float = 30.0
    t60_s: float | None = None  # None: taken from the condition preset
    target_input_fwssnr_db: float | None = None
    noise_gain: float = 1.0  # used only when no fwSSNR target applies
    noise_shape: str = "speech"
    max_pause_s: float = 0.5
    pause_every_s: float = 4.0
    pause_length_s: float = 1.5
    angles_deg: tuple = (-45.0, 45.0)
    direct_to_reverb_db: float = 5.0
    shadow_db: float = 12.0


@dataclass
class MaskConfig:
    source: str = "oracle"
    path: str | None = None


@dataclass
class AadConfig:
    mode: str = "synth"
    rate: int = 64
    channels: int = 16
    snr_db: float = 20.0
    lag_range_ms: tuple = (0.0, 250.0)
    ridge: float = 100.0
    trial_seconds: float = 30.0
    attended_speaker: int = 0
    eeg_path: str | None = None
    labels_path: str | None = None


@dataclass
class PipelineConfig:
    seed: int
    sample_rate: int = 16000
    scene: SceneConfig = field(default_factory=SceneConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    beamformer_type: str = "wMPDR"
    beamformer: ConvBeamformerConfig = field(default_factory=ConvBeamformerConfig)
    masks: MaskConfig = field(default_factory=MaskConfig)
    aad: AadConfig = field(default_factory=AadConfig)
    metrics: FwssnrConfig = field(default_factory=FwssnrConfig)


def _build(section_cls, data, name):
    if data is None:
        return section_cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    try:
        return section_cls(**{k: _tupled(v) for k, v in data.items()})
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def load_config(path):
    """Parse and validate a JSON pipeline configuration."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if "seed" not in raw:
        raise ConfigError("config must set an explicit seed")
    cfg = PipelineConfig(
        seed=int(raw["seed"]),
        sample_rate=int(raw.get("sample_rate", 16000)),
        scene=_build(SceneConfig, raw.get("scene"), "scene"),
        stft=_build(StftConfig, raw.get("stft"), "stft"),
        beamformer_type=raw.get("beamformer_type", "wMPDR"),
        beamformer=_build(ConvBeamformerConfig, raw.get("beamformer"), "beamformer"),
        masks=_build(MaskConfig, raw.get("masks"), "masks"),
        aad=_build(AadConfig, raw.get("aad"), "aad"),
        metrics=_build(FwssnrConfig, raw.get("metrics"), "metrics"),
    )
    if cfg.beamformer_type not in BEAMFORMER_TYPES:
        raise ConfigError(
            f"beamformer_type must be one of {BEAMFORMER_TYPES}, "
            f"got {cfg.beamformer_type!r}"
        )
    if cfg.scene.condition not in CONDITION_PRESETS and cfg.scene.condition != "custom":
        raise ConfigError(f"unknown scene condition {cfg.scene.condition!r}")
    if cfg.masks.source not in ("oracle", "file"):
        raise ConfigError("masks.source must be 'oracle' or 'file'")
    if cfg.masks.source == "file":
        if not cfg.masks.path or not Path(cfg.masks.path).exists():
            raise ConfigError(f"mask file not found: {cfg.masks.path}")
    if cfg.aad.mode not in ("synth", "file"):
        raise ConfigError("aad.mode must be 'synth' or 'file'")
    if cfg.aad.mode == "file":
        for key in ("eeg_path", "labels_path"):
            p = getattr(cfg.aad, key)
            if not p or not Path(p).exists():
                raise ConfigError(f"aad.{key} not found: {p}")
    return cfg


def write_wav(path, signal, sample_rate, bits=32):
    """Write (M, N) float audio; 32-bit float by default, 16-bit gets
    triangular dither before quantization."""
    signal = np.atleast_2d(np.asarray(signal, dtype=np.float64))
    data = signal.T
    if bits == 32:
        scipy.io.wavfile.write(path, sample_rate, data.astype(np.float32))
        return {"format": "float32", "dithered": False}
    if bits == 16:
        rng = np.random.default_rng(0xD17)
        dither = (rng.random(data.shape) - rng.random(data.shape)) / 32768.0
        scaled = np.clip(data + dither, -1.0, 1.0 - 1.0 / 32768.0)
        scipy.io.wavfile.write(
            path, sample_rate, np.round(scaled * 32768.0).astype(np.int16)
        )
        return {"format": "int16", "dithered": True}
    raise ValueError(f"unsupported bit depth {bits}")


def read_wav(path):
    """Read WAV as (M, N) float64 in [-1, 1]; 16-bit input is rescaled."""
    rate, data = scipy.io.wavfile.read(path)
    if data.ndim == 1:
        data = data[:, None]
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    else:
        data = data.astype(np.float64)
    return data.T, rate


def _speaker_reference_mics(anechoic_irs):
    """Reference microphone per speaker: where its direct path is strongest."""
    energy = (anechoic_irs**2).sum(axis=2)
    return [int(np.argmax(energy[i])) for i in range(energy.shape[0])]


def cmd_simulate(cfg, out_dir):
    """Build and store a rendered scene with all oracle components."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = cfg.scene
    fs = cfg.sample_rate
    if sc.condition == "custom":
        t60, target = sc.t60_s, sc.target_input_fwssnr_db
    else:
        t60, target = CONDITION_PRESETS[sc.condition]
        if sc.t60_s is not None:
            t60 = sc.t60_s
        if sc.target_input_fwssnr_db is not None:
            target = sc.target_input_fwssnr_db
    if t60 is None:
        raise ConfigError("custom condition needs scene.t60_s")

    sources = []
    for i in range(sc.n_speakers):
        raw = scene.synthetic_speech(
            sc.duration_s * 1.25 + sc.pause_length_s,
            fs,
            pause_every=sc.pause_every_s,
            pause_length=sc.pause_length_s,
            seed=np.random.SeedSequence((cfg.seed, 100 + i)),
        )
        trimmed = scene.shorten_pauses(raw, sc.max_pause_s, fs)
        sources.append(trimmed)
    n = min(min(len(s) for s in sources), int(sc.duration_s * fs))
    sources = [s[:n] for s in sources]

    irs, anech = scene.synthetic_room_irs(
        sc.n_speakers,
        sc.n_mics,
        fs,
        t60=t60,
        direct_to_reverb_db=sc.direct_to_reverb_db,
        shadow_db=sc.shadow_db,
        seed=np.random.SeedSequence((cfg.seed, 200)),
    )
    noise = scene.generate_decorrelated_noise(
        sc.n_mics,
        n + irs.shape[2],
        sc.noise_shape,
        fs,
        seed=np.random.SeedSequence((cfg.seed, 300)),
    )
    acoustic = scene.AcousticScene(sources, irs, anech, noise, fs)
    ref_mics = _speaker_reference_mics(anech)
    if target is None:
        gain = sc.noise_gain
    else:
        gain = scene.calibrate_noise_gain(
            acoustic, target, cfg=cfg.metrics, reference_mics=ref_mics
        )
    rendered = scene.render(acoustic, gain)

    write_wav(out / "mics.wav", rendered.mics, fs)
    write_tensor(out / "components_reverberant.cbtf", rendered.components)
    write_tensor(out / "components_anechoic.cbtf", rendered.anechoic)
    write_tensor(out / "noise.cbtf", rendered.noise)
    write_tensor(out / "sources.cbtf", np.stack(sources))
    write_tensor(out / "irs_reverberant.cbtf", irs)
    write_tensor(out / "irs_anechoic.cbtf", anech)

    per_speaker = [
        metrics.input_fwssnr(rendered, i, cfg.metrics, fs, ref_mics[i])
        for i in range(sc.n_speakers)
    ]
    meta = {
        "seed": cfg.seed,
        "sample_rate": fs,
        "condition": sc.condition,
        "t60_s": t60,
        "angles_deg": list(sc.angles_deg)[: sc.n_speakers],
        "n_speakers": sc.n_speakers,
        "n_mics": sc.n_mics,
        "noise_gain": gain,
        "reference_mics": ref_mics,
        "input_fwssnr_db": per_speaker,
        "mean_input_fwssnr_db": float(np.mean(per_speaker)),
        "audio": {"format": "float32", "dithered": False},
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def _load_scene_dir(scene_dir):
    scene_dir = Path(scene_dir)
    mics, rate = read_wav(scene_dir / "mics.wav")
    rendered = scene.RenderedScene(
        mics,
        read_tensor(scene_dir / "components_reverberant.cbtf"),
        read_tensor(scene_dir / "components_anechoic.cbtf"),
        read_tensor(scene_dir / "noise.cbtf"),
        rate,
    )
    meta = json.loads((scene_dir / "metadata.json").read_text())
    meta["_scene_dir"] = str(scene_dir)
    return rendered, meta


def _mask_set(cfg, rendered, mix_spec):
    if cfg.masks.source == "file":
        loaded = read_tensor(Path(cfg.masks.path))
        if loaded.ndim == 4:
            # per-microphone estimates carry a speaker-permutation ambiguity:
            # resolve it against the first microphone, then pool
            per_mic = [np.clip(loaded[m], 0.0, 1.0) for m in range(loaded.shape[0])]
            mask_set = masks.average_masks(masks.align_masks(per_mic, 0))
        else:
            mask_set = masks.load_masks(cfg.masks.path)
        if mask_set.shape[1:] != mix_spec.shape[1:]:
            raise ConfigError(
                f"mask tensor {mask_set.shape} does not match spectrogram "
                f"frames/bins {mix_spec.shape[1:]}"
            )
        return mask_set
    comps = [
        stft.analyze(rendered.components[i], cfg.stft)
        for i in range(rendered.components.shape[0])
    ]
    noise_spec = stft.analyze(rendered.noise, cfg.stft)
    # oracle masks share the construction's source order on every microphone,
    # so no permutation matching is needed before pooling
    per_mic = [
        masks.oracle_irm(comps, noise_spec, m) for m in range(mix_spec.shape[0])
    ]
    return masks.average_masks(per_mic)


def _anechoic_steering(anechoic_irs, cfg, speaker, reference_mic):
    """Exact per-bin steering from the stored direct-path impulse responses,
    normalized to the reference microphone: shape (bins, mics)."""
    spectra = np.fft.rfft(anechoic_irs[speaker], n=cfg.stft.frame_length, axis=1)
    ref = spectra[reference_mic]
    if np.any(np.abs(ref) < 1e-12):
        raise ConfigError(
            f"speaker {speaker} has no direct path at microphone {reference_mic}"
        )
    return (spectra / ref).T


def _noise_covariance(rendered, cfg):
    noise_spec = stft.analyze(rendered.noise, cfg.stft)
    m, k, f = noise_spec.shape
    cov = np.empty((f, m, m), dtype=complex)
    for fi in range(f):
        y = noise_spec[:, :, fi].T
        c = y.T @ y.conj() / k
        cov[fi] = 0.5 * (c + c.conj().T)
    return cov


def cmd_enhance(cfg, scene_dir, out_dir):
    """Run the configured beamformer once per speaker; write WAV outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rendered, meta = _load_scene_dir(scene_dir)
    fs = meta["sample_rate"]
    mix_spec = stft.analyze(rendered.mics, cfg.stft)
    mask_set = _mask_set(cfg, rendered, mix_spec)
    n_speakers = meta["n_speakers"]
    ref_mics = meta["reference_mics"]

    kind = cfg.beamformer_type
    diag_all = {}
    for i in range(n_speakers):
        bf_cfg = beamform.ConvBeamformerConfig(
            **{**_cfg_dict(cfg.beamformer), "reference_mic": ref_mics[i]}
        )
        target = mask_set[i]
        others = [mask_set[j] for j in range(n_speakers) if j != i]
        if kind == "wMPDR":
            result = beamform.run_conv_beamformer(
                mix_spec, target, cfg=bf_cfg, mode="wmpdr", sample_rate=fs
            )
        elif kind == "wLCMP":
            result = beamform.run_conv_beamformer(
                mix_spec, target, others, bf_cfg, mode="wlcmp", sample_rate=fs
            )
        elif kind == "MPDR":
            result = beamform.mpdr(mix_spec, target, bf_cfg)
        elif kind == "LCMP":
            result = beamform.lcmp(mix_spec, target, others, cfg=bf_cfg)
        else:  # MVDR / LCMV with oracle anechoic steering and noise stats
            anech_irs = read_tensor(Path(meta["_scene_dir"]) / "irs_anechoic.cbtf")
            steering = _anechoic_steering(anech_irs, cfg, i, ref_mics[i])
            noise_cov = _noise_covariance(rendered, cfg)
            interferer = None
            delta = None
            if kind == "LCMV":
                others_steer = [
                    _anechoic_steering(anech_irs, cfg, j, ref_mics[i])
                    for j in range(n_speakers)
                    if j != i
                ]
                interferer = np.stack(others_steer, axis=2)  # (bins, mics, U)
                delta = bf_cfg.delta
            result = beamform.mvdr_lcmv(
                mix_spec, steering, noise_cov, delta, interferer, bf_cfg
            )
        signal = stft.synthesize(result.z[None], cfg.stft)[0]
        write_wav(out / f"speaker{i}.wav", signal, fs)
        diag_all[f"speaker{i}"] = {
            "beamformer": kind,
            "max_constraint_residual": result.diagnostics.max_constraint_residual,
            "failed_bins": len(result.diagnostics.failed_bins),
            "objective": [float(v) for v in result.diagnostics.objective],
        }
    (out / "diagnostics.json").write_text(
        json.dumps(diag_all, indent=2, sort_keys=True)
    )
    return diag_all


def _cfg_dict(dc):
    d = asdict(dc)
    return d


def _trial_spans(n_samples, fs, trial_seconds):
    per = int(round(trial_seconds * fs))
    return [(t * per, (t + 1) * per) for t in range(n_samples // per)]


def cmd_decode(cfg, scene_dir, enhance_dir, out_dir):
    """Per 30 s trial: envelopes, reconstruction, speaker selection."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rendered, meta = _load_scene_dir(scene_dir)
    fs = meta["sample_rate"]
    n_speakers = meta["n_speakers"]
    ref_mics = meta["reference_mics"]
    ac = cfg.aad

    enhanced = []
    for i in range(n_speakers):
        sig, _ = read_wav(Path(enhance_dir) / f"speaker{i}.wav")
        enhanced.append(sig[0])
    n = min(map(len, enhanced))
    candidate_envs = np.stack(
        [aad.extract_envelope(e[:n], fs, ac.rate) for e in enhanced]
    )

    spans = _trial_spans(candidate_envs.shape[1], ac.rate, ac.trial_seconds)
    if not spans:
        raise ConfigError(
            f"scene too short for one {ac.trial_seconds:.0f}-second trial"
        )

    if ac.mode == "synth":
        # listener-side envelopes come from the clean direct-path components
        clean_envs = np.stack(
            [
                aad.extract_envelope(rendered.anechoic[i, ref_mics[i]][:n], fs, ac.rate)
                for i in range(n_speakers)
            ]
        )
        trial_set = aad.make_synthetic_trial_set(
            clean_envs[:, : spans[-1][1]],
            ac.attended_speaker,
            ac.rate,
            ac.channels,
            ac.snr_db,
            seed=cfg.seed,
            trial_seconds=ac.trial_seconds,
        )
        eeg_trials = [t.eeg for t in trial_set.trials]
        labels = [t.attended for t in trial_set.trials]
    else:
        eeg = read_tensor(Path(ac.eeg_path))
        if eeg.ndim != 3:
            raise ConfigError("EEG tensor must have shape (trials, channels, samples)")
        labels = json.loads(Path(ac.labels_path).read_text())
        if len(labels) != eeg.shape[0]:
            raise ConfigError("label count does not match EEG trials")
        eeg_trials = [eeg[t] for t in range(eeg.shape[0])]
    n_trials = min(len(spans), len(eeg_trials))

    records = []
    for t in range(n_trials):
        lo, hi = spans[t]
        # leave-one-out training on the listener's remaining trials
        train_eeg = [eeg_trials[j] for j in range(n_trials) if j != t]
        train_env = [
            candidate_envs[labels[j], spans[j][0] : spans[j][1]]
            for j in range(n_trials)
            if j != t
        ]
        decoder = aad.train_decoder(
            train_eeg, train_env, ac.lag_range_ms, ac.ridge, ac.rate
        )
        recon = aad.reconstruct_envelope(eeg_trials[t], decoder)
        sel = aad.select_speaker(
            [candidate_envs[i, lo:hi] for i in range(n_speakers)], recon
        )
        records.append(
            {
                "trial": t,
                "selected": sel.index,
                "attended": int(labels[t]),
                "correlations": [None if np.isnan(r) else float(r) for r in sel.correlations],
                "tie": sel.tie,
                "excluded": list(sel.excluded),
            }
        )
    with open(out / "trials.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


def cmd_evaluate(cfg, scene_dir, enhance_dir, decode_dir, out_dir):
    """Score the pipeline: per-trial fwSSNR deltas, decoding accuracy under
    envelope-based and best-delta selection, and chance bounds."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rendered, meta = _load_scene_dir(scene_dir)
    fs = meta["sample_rate"]
    n_speakers = meta["n_speakers"]
    ref_mics = meta["reference_mics"]

    enhanced = []
    for i in range(n_speakers):
        sig, _ = read_wav(Path(enhance_dir) / f"speaker{i}.wav")
        enhanced.append(sig[0])
    n = min(min(map(len, enhanced)), rendered.mics.shape[1])

    records = [
        json.loads(line)
        for line in (Path(decode_dir) / "trials.jsonl").read_text().splitlines()
    ]
    spans = _trial_spans(n, fs, cfg.aad.trial_seconds)

    trial_rows = []
    outcomes = []
    oracle_delta = []
    est_delta = []
    for rec in records:
        t = rec["trial"]
        if t >= len(spans):
            break
        lo, hi = spans[t]
        attended = rec["attended"]
        reference = rendered.anechoic[attended, ref_mics[attended], lo:hi]
        inputs = [
            metrics.fwssnr(rendered.mics[m, lo:hi], reference, cfg.metrics, fs)
            for m in range(rendered.mics.shape[0])
        ]
        input_db = max(inputs)
        scores = [
            metrics.fwssnr(enhanced[i][lo:hi], reference, cfg.metrics, fs)
            for i in range(n_speakers)
        ]
        selected = rec["selected"]
        discarded = [i for i in range(n_speakers) if i != selected][0]
        outcome = metrics.DecodeOutcome(
            scores[selected] > scores[discarded],
            scores[selected] == scores[discarded],
            scores[selected],
            scores[discarded],
        )
        outcomes.append(outcome)
        est_delta.append(scores[selected] - input_db)
        oracle_delta.append(max(scores) - input_db)
        trial_rows.append(
            {
                "trial": t,
                "attended": attended,
                "selected": selected,
                "input_fwssnr_db": input_db,
                "output_fwssnr_db": scores,
                "delta_est_db": scores[selected] - input_db,
                "delta_oracle_db": max(scores) - input_db,
                "correct": outcome.correct,
                "tie": outcome.tie,
            }
        )

    n_trials = len(trial_rows)
    report = {
        "condition": meta["condition"],
        "beamformer": cfg.beamformer_type,
        "n_trials": n_trials,
        "input_fwssnr_db": float(np.mean([r["input_fwssnr_db"] for r in trial_rows])),
        "delta_fwssnr_est_aad_db": float(np.mean(est_delta)),
        "delta_fwssnr_oracle_aad_db": float(np.mean(oracle_delta)),
        "aad_accuracy_pct": metrics.aad_accuracy(outcomes),
        "oracle_aad_accuracy_pct": 100.0,
        "chance_upper_bound_pct": metrics.chance_upper_bound(n_trials),
        "published_chance_bounds_pct": metrics.PUBLISHED_CHANCE_BOUND_PCT,
        "trials": trial_rows,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))

    table_dir = out / "tables"
    table_dir.mkdir(exist_ok=True)
    with open(table_dir / "trials.tsv", "w") as fh:
        fh.write("trial\tattended\tselected\tinput_db\tdelta_est_db\tdelta_oracle_db\tcorrect\n")
        for r in trial_rows:
            fh.write(
                f"{r['trial']}\t{r['attended']}\t{r['selected']}\t"
                f"{r['input_fwssnr_db']:.3f}\t{r['delta_est_db']:.3f}\t"
                f"{r['delta_oracle_db']:.3f}\t{int(r['correct'])}\n"
            )
    return report


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="cogbeam",
        description="simulate, enhance, decode and evaluate multichannel "
        "speech-enhancement scenes",
    )
    parser.add_argument("command", choices=["simulate", "enhance", "decode", "evaluate"])
    parser.add_argument("--config", required=True, help="JSON configuration file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--scene", help="scene directory (enhance/decode/evaluate)")
    parser.add_argument("--enhanced", help="enhance output directory (decode/evaluate)")
    parser.add_argument("--decoded", help="decode output directory (evaluate)")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.command == "simulate":
            cmd_simulate(cfg, args.out)
        elif args.command == "enhance":
            _require(args.scene, "--scene")
            cmd_enhance(cfg, args.scene, args.out)
        elif args.command == "decode":
            _require(args.scene, "--scene")
            _require(args.enhanced, "--enhanced")
            cmd_decode(cfg, args.scene, args.enhanced, args.out)
        else:
            _require(args.scene, "--scene")
            _require(args.enhanced, "--enhanced")
            _require(args.decoded, "--decoded")
            cmd_evaluate(cfg, args.scene, args.enhanced, args.decoded, args.out)
    except Exception as exc:  # noqa: BLE001 - single exit point for the CLI
        record = {
            "error": type(exc).__name__,
            "message": str(exc),
            "command": args.command,
        }
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


def _require(value, flag):
    if not value:
        raise ConfigError(f"{flag} is required for this command")


if __name__ == "__main__":
    sys.exit(main())
