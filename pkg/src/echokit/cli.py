"""Command-line pipeline driver.

Subcommands: sim | beamform | doppler | clutter | ulm | train | bench |
metrics.  Configuration comes from strict `key = value` text files merged
with command-line flags (flags win); unknown keys are rejected.  All
artifacts are written atomically (temp file + rename) and every run logs
its fully-resolved configuration to stderr.  Exit codes: 64 usage,
65 config, 66 data, 70 numerical/internal.
"""

import argparse
import math
import os
import sys
import tempfile
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import beamform, core, doppler, lowrank, nn, sim, ulm
from .core import ConfigError, DataError, NumericalError

EXIT_OK = 0
EXIT_USAGE = 64
EXIT_CONFIG = 65
EXIT_DATA = 66
EXIT_INTERNAL = 70

ENCODER_DECODER_REFERENCE_PARAMS = 700_000   # published CNN baseline, for scale


# ---------------------------------------------------------------------------
# config plumbing


def parse_config_file(path):
    """Strict `key = value` lines; # comments and blank lines allowed."""
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not key or not value:
                raise ConfigError(f"{path}:{ln}: empty key or value")
            if key in out:
                raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
            out[key] = value
    return out


def _coerce(key, raw, kind):
    try:
        if kind is bool:
            low = str(raw).lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}")


def resolve_config(schema, file_cfg, overrides=None):
    """Merge schema defaults < config file < explicit overrides."""
    unknown = set(file_cfg) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)} "
                          f"(known: {sorted(schema)})")
    out = {}
    for key, (kind, default) in schema.items():
        if key in file_cfg:
            out[key] = _coerce(key, file_cfg[key], kind)
        else:
            out[key] = default
    for key, value in (overrides or {}).items():
        if value is not None:
            if key not in schema:
                raise ConfigError(f"unknown override {key!r}")
            out[key] = _coerce(key, value, schema[key][0])
    return out


def log_config(subcommand, cfg):
    print(f"# resolved config [{subcommand}]", file=sys.stderr)
    for key in sorted(cfg):
        print(f"# {key} = {cfg[key]}", file=sys.stderr)


# ---------------------------------------------------------------------------
# atomic artifact writers


def _atomic_bytes(path, payload):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    tmp = tempfile.NamedTemporaryFile(dir=d, delete=False)
    try:
        tmp.write(payload)
        tmp.close()
        os.replace(tmp.name, path)
    except BaseException:
        tmp.close()
        if os.path.exists(tmp.name):
            os.unlink(tmp.name)
        raise


def write_tensor_atomic(path, arr):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    tmp = tempfile.NamedTemporaryFile(dir=d, delete=False)
    tmp.close()
    try:
        core.write_tensor(tmp.name, arr)
        os.replace(tmp.name, path)
    except BaseException:
        if os.path.exists(tmp.name):
            os.unlink(tmp.name)
        raise


def write_report_atomic(path, pairs):
    text = "".join(f"{k} = {v}\n" for k, v in pairs)
    _atomic_bytes(path, text.encode())


def emit_image(tensor, path, mode="log", dynamic_range_db=60.0):
    """8-bit binary PGM; log mode clips to [max - DR, max] dB."""
    img = np.asarray(tensor)
    if img.ndim != 2:
        raise ConfigError("image must be 2-D")
    if not np.all(np.isfinite(img)):
        raise DataError("image contains NaN or infinity")
    mag = np.abs(img).astype(np.float64)
    peak = mag.max()
    if mode == "linear":
        scaled = mag / peak if peak > 0 else np.zeros_like(mag)
    elif mode == "log":
        if dynamic_range_db <= 0:
            raise ConfigError("dynamic range must be positive dB")
        if peak <= 0:
            scaled = np.zeros_like(mag)
        else:
            with np.errstate(divide="ignore"):
                db = 20.0 * np.log10(mag / peak)
            db = np.maximum(db, -dynamic_range_db)
            scaled = (db + dynamic_range_db) / dynamic_range_db
    else:
        raise ConfigError(f"unknown image mode {mode!r}")
    pix = np.rint(scaled * 255.0).clip(0, 255).astype(np.uint8)
    h, w = pix.shape
    _atomic_bytes(path, f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


class Emitter:
    """Collects planned artifacts; --dry-run lists them without writing."""

    def __init__(self, dry_run):
        self.dry_run = dry_run

    def tensor(self, path, arr):
        if self.dry_run:
            print(f"would write {path}")
            return
        write_tensor_atomic(path, arr)
        print(f"wrote {path}")

    def report(self, path, pairs):
        if self.dry_run:
            print(f"would write {path}")
            return
        write_report_atomic(path, pairs)
        print(f"wrote {path}")

    def image(self, path, tensor, mode, dr):
        if self.dry_run:
            print(f"would write {path}")
            return
        emit_image(tensor, path, mode, dr)
        print(f"wrote {path}")


def _read_input(path):
    if not os.path.exists(path):
        raise DataError(f"input not found: {path}")
    return core.read_tensor(path)


# ---------------------------------------------------------------------------
# sim


SIM_SCHEMAS = {
    "ulm-desk": {
        "n_frames": (int, 40), "bubbles_per_frame": (int, 3),
        "noise_level": (float, 0.02), "psf_sigma": (float, 4.8),
        "grid_n": (int, 16), "upscale": (int, 8),
    },
    "clutter-desk": {
        "side": (int, 32), "n_frames": (int, 20), "rank": (int, 2),
        "sparse_fraction": (float, 0.05), "amplitude_ratio": (float, 100.0),
    },
    "doppler-desk": {
        "n_samples": (int, 256), "f1": (float, 0.1),
        "delta_f": (float, 1.5 / 64), "tone_power": (float, 1.0),
        "noise_power": (float, 0.01),
    },
    "beamform-desk": {
        "n_elements": (int, 65), "n_samples": (int, 400),
        "interferer_amp": (float, 10.0), "noise_level": (float, 1e-3),
    },
}


def run_sim(args, emit):
    preset = args.preset
    if preset not in SIM_SCHEMAS:
        raise ConfigError(f"unknown preset {preset!r} "
                          f"(available: {sorted(SIM_SCHEMAS)})")
    file_cfg = parse_config_file(args.config) if args.config else {}
    cfg = resolve_config(SIM_SCHEMAS[preset], file_cfg)
    log_config(f"sim/{preset}", {**cfg, "seed": args.seed})
    out = args.output
    meta = [("preset", preset), ("seed", args.seed)] + sorted(cfg.items())

    if preset == "ulm-desk":
        g = sim.ImageGrid(cfg["grid_n"], cfg["grid_n"], upscale=cfg["upscale"])
        psf = sim.make_psf(cfg["psf_sigma"], cfg["psf_sigma"])
        frames = sim.simulate_ulm_frames(g, psf, cfg["n_frames"],
                                         cfg["bubbles_per_frame"],
                                         cfg["noise_level"], args.seed)
        emit.tensor(os.path.join(out, "y.ust"),
                    np.stack([f.y for f in frames]))
        emit.tensor(os.path.join(out, "x_true.ust"),
                    np.stack([f.x_true for f in frames]))
        emit.tensor(os.path.join(out, "psf.ust"), psf)
    elif preset == "clutter-desk":
        d, l, s = sim.simulate_lowrank_sparse(
            cfg["side"] ** 2, cfg["n_frames"], cfg["rank"],
            cfg["sparse_fraction"], cfg["amplitude_ratio"], args.seed)
        hw = (cfg["side"], cfg["side"])
        emit.tensor(os.path.join(out, "d.ust"), lowrank.movie_from_casorati(d, hw))
        emit.tensor(os.path.join(out, "l_true.ust"), lowrank.movie_from_casorati(l, hw))
        emit.tensor(os.path.join(out, "s_true.ust"), lowrank.movie_from_casorati(s, hw))
    elif preset == "doppler-desk":
        comps = [
            {"doppler_freq_cyc_per_sample": cfg["f1"], "power": cfg["tone_power"],
             "phase": 0.0},
            {"doppler_freq_cyc_per_sample": cfg["f1"] + cfg["delta_f"],
             "power": cfg["tone_power"], "phase": 0.0},
        ]
        x = sim.simulate_slow_time(comps, cfg["n_samples"], cfg["noise_power"],
                                   args.seed)
        emit.tensor(os.path.join(out, "x.ust"), x)
    else:   # beamform-desk: point target plus a strong off-axis interferer
        geom = sim.linear_array(n_elements=cfg["n_elements"])
        scatterers = [
            sim.Scatterer((0.0, 8.0e-3), 1.0),
            sim.Scatterer((1.2e-3, 8.25e-3), cfg["interferer_amp"]),
        ]
        ch = sim.simulate_channel_data(geom, scatterers,
                                       n_samples=cfg["n_samples"],
                                       noise_level=cfg["noise_level"],
                                       rng=args.seed)
        emit.tensor(os.path.join(out, "channels.ust"), ch)
    emit.report(os.path.join(out, "metadata.txt"), meta)
    return EXIT_OK


# ---------------------------------------------------------------------------
# beamform


BEAMFORM_SCHEMA = {
    "method": (str, "das"), "window": (str, "hann"),
    "n_elements": (int, 65), "pitch": (float, 3.0e-4),
    "speed_of_sound": (float, 1540.0), "sampling_rate": (float, 2.0e7),
    "modulation_frequency": (float, 5.0e6), "tx_angle": (float, 0.0),
    "grid_nz": (int, 41), "grid_nx": (int, 41),
    "grid_dz": (float, 5.0e-5), "grid_dx": (float, 5.0e-5),
    "z_start": (float, 7.0e-3), "x_center": (float, 0.0),
    "subarray_len": (int, 0), "n_avg_fast": (int, 3), "delta": (float, 1e-3),
    "image_mode": (str, "log"), "dynamic_range_db": (float, 60.0),
}


def run_beamform(args, emit):
    file_cfg = parse_config_file(args.config) if args.config else {}
    cfg = resolve_config(BEAMFORM_SCHEMA, file_cfg,
                         {"method": args.method,
                          "dynamic_range_db": args.dynamic_range})
    log_config("beamform", cfg)
    channels = _read_input(args.input)
    if channels.ndim != 2:
        raise DataError(f"expected (elements, samples) channel data, got {channels.shape}")
    if channels.shape[0] != cfg["n_elements"]:
        raise DataError(f"channel count {channels.shape[0]} != configured "
                        f"n_elements {cfg['n_elements']}")
    geom = sim.linear_array(cfg["n_elements"], cfg["pitch"],
                            cfg["speed_of_sound"], cfg["sampling_rate"],
                            cfg["modulation_frequency"])
    grid = sim.ImageGrid(cfg["grid_nz"], cfg["grid_nx"], upscale=1,
                         dz=cfg["grid_dz"], dx=cfg["grid_dx"],
                         z_start=cfg["z_start"], x_center=cfg["x_center"])
    delays = beamform.compute_delays(geom, grid, tx_angle=cfg["tx_angle"])
    t0 = time.perf_counter()
    if cfg["method"] == "das":
        image, _ = beamform.das_beamform(geom, channels, delays,
                                         apod=cfg["window"])
    elif cfg["method"] == "mvdr":
        sub = cfg["subarray_len"] or None
        image, _ = beamform.mvdr_beamform(geom, channels, delays,
                                          subarray_len=sub,
                                          n_avg_fast=cfg["n_avg_fast"],
                                          delta=cfg["delta"])
    else:
        raise ConfigError(f"unknown beamforming method {cfg['method']!r}")
    print(f"# beamform {cfg['method']} took {time.perf_counter()-t0:.3f}s",
          file=sys.stderr)
    out = args.output
    emit.tensor(os.path.join(out, "image.ust"), image)
    emit.image(os.path.join(out, "image.pgm"), np.abs(image),
               cfg["image_mode"], cfg["dynamic_range_db"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# doppler


DOPPLER_SCHEMA = {
    "estimator": (str, "welch"), "window_len": (int, 64), "hop": (int, 0),
    "segment_len": (int, 0), "overlap_frac": (float, 0.5),
    "window": (str, "hann"), "filter_len": (int, 16),
    "loading": (float, 1e-2), "n_freqs": (int, 128),
    "dynamic_range_db": (float, 60.0),
}


def run_doppler(args, emit):
    file_cfg = parse_config_file(args.config) if args.config else {}
    cfg = resolve_config(DOPPLER_SCHEMA, file_cfg,
                         {"estimator": args.estimator})
    log_config("doppler", cfg)
    x = _read_input(args.input)
    if x.ndim != 1:
        raise DataError(f"expected a 1-D slow-time signal, got {x.shape}")
    kwargs = {}
    if cfg["estimator"] == "welch":
        kwargs["window"] = cfg["window"]
        kwargs["overlap_frac"] = cfg["overlap_frac"]
        if cfg["segment_len"]:
            kwargs["segment_len"] = cfg["segment_len"]
    elif cfg["estimator"] == "capon":
        kwargs["filter_len"] = cfg["filter_len"]
        kwargs["loading"] = cfg["loading"]
        kwargs["n_freqs"] = cfg["n_freqs"]
    else:
        raise ConfigError(f"unknown estimator {cfg['estimator']!r}")
    t0 = time.perf_counter()
    if cfg["estimator"] == "welch":
        est = doppler.welch_psd(x, **kwargs)
    else:
        est = doppler.capon_psd(x, **kwargs)
    spec = doppler.spectrogram(x, window_len=cfg["window_len"],
                               hop=cfg["hop"] or None,
                               estimator=cfg["estimator"], **kwargs)
    print(f"# doppler {cfg['estimator']} took {time.perf_counter()-t0:.3f}s",
          file=sys.stderr)
    out = args.output
    emit.tensor(os.path.join(out, "psd.ust"), est.power)
    emit.tensor(os.path.join(out, "psd_freqs.ust"), est.freqs)
    emit.tensor(os.path.join(out, "spectrogram.ust"), spec.power)
    emit.image(os.path.join(out, "spectrogram.pgm"), spec.power, "log",
               cfg["dynamic_range_db"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# clutter


# lambda defaults suit movies whose echoes are O(1) per pixel (the sim
# presets); pass 0 to fall back to the spectral-norm auto rule, which is
# safer on arbitrarily scaled data but splits less cleanly.
CLUTTER_SCHEMA = {
    "method": (str, "fista"), "rank": (int, 2),
    "lambda1": (float, 0.8), "lambda2": (float, 0.16),
    "max_iter": (int, 200), "momentum": (bool, True),
    "init": (str, "data"), "layers": (int, 0),
}


def run_clutter(args, emit):
    file_cfg = parse_config_file(args.config) if args.config else {}
    cfg = resolve_config(CLUTTER_SCHEMA, file_cfg,
                         {"method": args.method, "rank": args.rank,
                          "lambda1": args.lambda1, "lambda2": args.lambda2,
                          "layers": args.layers})
    log_config("clutter", cfg)
    movie = _read_input(args.input)
    if movie.ndim != 3:
        raise DataError(f"expected an (H, W, T) movie, got {movie.shape}")
    hw = movie.shape[:2]
    mat = lowrank.casorati(movie)
    t0 = time.perf_counter()
    if cfg["method"] == "svd":
        s_mat = lowrank.svd_filter(mat, cfg["rank"])   # removes the tissue part
        l_mat = mat - s_mat
    elif cfg["method"] == "fista":
        lam1 = cfg["lambda1"] or None
        lam2 = cfg["lambda2"] or None
        res = lowrank.rpca_fista(mat, lam1, lam2, max_iter=cfg["max_iter"],
                                 momentum=cfg["momentum"], init=cfg["init"])
        l_mat, s_mat = res.l, res.s
    elif cfg["method"] == "corona":
        if args.checkpoint:
            params = lowrank.CoronaParams.from_values(
                nn.load_checkpoint(args.checkpoint))
        elif cfg["layers"]:
            lam1, lam2 = lowrank.default_lambdas(mat)
            params = lowrank.corona_init_from_fista(cfg["layers"], lam1, lam2)
        else:
            raise ConfigError("corona needs --checkpoint or a layers count")
        l_mov, s_mov = lowrank.corona_forward(movie, params)
        l_mat, s_mat = lowrank.casorati(l_mov), lowrank.casorati(s_mov)
    else:
        raise ConfigError(f"unknown clutter method {cfg['method']!r}")
    print(f"# clutter {cfg['method']} took {time.perf_counter()-t0:.3f}s",
          file=sys.stderr)

    out = args.output
    emit.tensor(os.path.join(out, "L.ust"), lowrank.movie_from_casorati(l_mat, hw))
    emit.tensor(os.path.join(out, "S.ust"), lowrank.movie_from_casorati(s_mat, hw))
    pairs = [("method", cfg["method"]),
             ("rank_L", int(np.linalg.matrix_rank(l_mat, tol=1e-6 * max(
                 1e-300, float(np.abs(l_mat).max()))))),
             ("sparsity_S", f"{float(np.mean(np.abs(s_mat) > 1e-12)):.6f}")]
    if args.truth:
        s_true = lowrank.casorati(_read_input(args.truth))
        if s_true.shape != s_mat.shape:
            raise DataError("truth shape does not match input movie")
        power = np.abs(s_mat).mean(axis=1).reshape(hw)
        signal = np.abs(s_true).mean(axis=1).reshape(hw) > 0
        background = ~signal
        if signal.any() and background.any():
            stats = lowrank.cnr_cr(power, signal, background)
            pairs.append(("cnr", f"{stats.cnr:.4f}"))
            if stats.cr_defined:
                pairs.append(("cr_db", f"{stats.cr_db:.4f}"))
        rel = np.linalg.norm(s_mat - s_true) / max(np.linalg.norm(s_true), 1e-300)
        pairs.append(("s_rel_error", f"{rel:.6f}"))
    emit.report(os.path.join(out, "report.txt"), pairs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ulm


ULM_SCHEMA = {
    "method": (str, "classic"), "detect_threshold_frac": (float, 0.1),
    "min_separation": (float, 2.0), "lam_frac": (float, 0.02),
    "n_iters": (int, 200), "match_radius": (float, 2.0),
    "dynamic_range_db": (float, 40.0),
}


def _ulm_inputs(path):
    base = path if os.path.isdir(path) else os.path.dirname(path)
    y_path = path if not os.path.isdir(path) else os.path.join(base, "y.ust")
    y = _read_input(y_path)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise DataError(f"expected (frames, H, W) observations, got {y.shape}")
    psf_path = os.path.join(base, "psf.ust")
    psf = core.read_tensor(psf_path) if os.path.exists(psf_path) else None
    truth_path = os.path.join(base, "x_true.ust")
    truth = core.read_tensor(truth_path) if os.path.exists(truth_path) else None
    return y, psf, truth


def run_ulm(args, emit):
    file_cfg = parse_config_file(args.config) if args.config else {}
    cfg = resolve_config(ULM_SCHEMA, file_cfg, {"method": args.method})
    log_config("ulm", cfg)
    y, psf, truth = _ulm_inputs(args.input)
    if args.truth:
        truth = _read_input(args.truth)
    method = cfg["method"]
    t0 = time.perf_counter()
    if method == "classic":
        factor = 1 if truth is None else truth.shape[-1] // y.shape[-1]
        sets = []
        for frame in y:
            env = np.abs(frame)
            thr = cfg["detect_threshold_frac"] * env.max() if env.max() > 0 else np.inf
            sets.append(ulm.classic_ulm(frame, thr, cfg["min_separation"],
                                        factor=max(factor, 1)))
        sr = ulm.accumulate(sets)
    elif method in ("ista", "fista"):
        if psf is None:
            raise DataError("ista/fista recovery needs psf.ust beside the input")
        factor = 8 if truth is None else truth.shape[-1] // y.shape[-1]
        op = ulm.build_operator(psf, (y.shape[1], y.shape[2]), factor=factor)
        recs = []
        for frame in y:
            lam = cfg["lam_frac"] * ulm.lambda_max(op, frame)
            x, _ = ulm.ista_recover(frame, op, lam, n_iters=cfg["n_iters"],
                                    variant=method)
            recs.append(x)
        sr = ulm.accumulate(recs)
    elif method == "unfolded":
        if not args.checkpoint:
            raise ConfigError("unfolded recovery needs --checkpoint")
        params = ulm.UnfoldedUlmParams.from_values(
            nn.load_checkpoint(args.checkpoint))
        recs = [ulm.unfolded_ulm_forward(frame, params) for frame in y]
        sr = ulm.accumulate(recs)
    else:
        raise ConfigError(f"unknown ulm method {method!r}")
    print(f"# ulm {method} took {time.perf_counter()-t0:.3f}s", file=sys.stderr)

    out = args.output
    emit.tensor(os.path.join(out, "sr.ust"), sr)
    emit.image(os.path.join(out, "sr.pgm"), np.abs(sr), "log",
               cfg["dynamic_range_db"])
    pairs = [("method", method), ("n_frames", y.shape[0])]
    if truth is not None:
        if method == "classic":
            est_items = sets
        else:
            est_items = []
            for x in recs:
                mags = np.abs(x)
                thr = cfg["detect_threshold_frac"] * mags.max() if mags.max() > 0 else np.inf
                est_items.append(ulm.classic_ulm(x, thr, cfg["min_separation"]))
        per = [ulm.ulm_metrics(e, t, cfg["match_radius"])
               for e, t in zip(est_items, truth)]
        pairs += [
            ("precision", f"{np.nanmean([m.precision for m in per]):.6f}"),
            ("recall", f"{np.nanmean([m.recall for m in per]):.6f}"),
            ("loc_rmse", f"{np.nanmean([m.loc_rmse for m in per]):.6f}"),
        ]
    emit.report(os.path.join(out, "report.txt"), pairs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


TRAIN_SCHEMA = {
    "what": (str, "corona"), "epochs": (int, 2), "lr": (float, 1e-3),
    "batch_size": (int, 4), "seed": (int, 0), "k_layers": (int, 4),
    "kernel_size": (int, 3), "ulm_kernel_size": (int, 17),
    "n_movies": (int, 8), "side": (int, 16),
    "n_frames": (int, 8), "sigma_g": (float, 1.5), "gamma": (float, 1e-4),
    "psf_sigma": (float, 2.0), "grid_n": (int, 8), "upscale": (int, 8),
    "n_train_frames": (int, 12), "bubbles_per_frame": (int, 2),
    "noise_level": (float, 0.01), "n_elements": (int, 8),
    "n_scenes": (int, 200), "hidden": (int, 16),
}


def run_train(args, emit):
    file_cfg = parse_config_file(args.config) if args.config else {}
    cfg = resolve_config(TRAIN_SCHEMA, file_cfg, {"what": args.what})
    log_config("train", cfg)
    what, seed = cfg["what"], cfg["seed"]
    t0 = time.perf_counter()
    if what == "corona":
        movies = []
        for i in range(cfg["n_movies"]):
            d, l, s = sim.simulate_lowrank_sparse(
                cfg["side"] ** 2, cfg["n_frames"], 2, 0.05, 100.0, seed + i)
            hw = (cfg["side"], cfg["side"])
            movies.append((lowrank.movie_from_casorati(d, hw),
                           lowrank.movie_from_casorati(l, hw),
                           lowrank.movie_from_casorati(s, hw)))
        params, history = lowrank.corona_train(
            movies[:-2], k_layers=cfg["k_layers"],
            kernel_size=cfg["kernel_size"], epochs=cfg["epochs"],
            lr=cfg["lr"], batch_size=cfg["batch_size"], seed=seed,
            val_data=movies[-2:])
        values = params.to_values()
    elif what == "ulm":
        psf = sim.make_psf(cfg["psf_sigma"], cfg["psf_sigma"])
        g = sim.ImageGrid(cfg["grid_n"], cfg["grid_n"], upscale=cfg["upscale"])
        frames = sim.simulate_ulm_frames(g, psf, cfg["n_train_frames"],
                                         cfg["bubbles_per_frame"],
                                         cfg["noise_level"], seed)
        val = sim.simulate_ulm_frames(g, psf, max(cfg["n_train_frames"] // 3, 2),
                                      cfg["bubbles_per_frame"],
                                      cfg["noise_level"], seed + 1)
        init = ulm.matched_filter_init(psf, k_layers=cfg["k_layers"],
                                       kernel_size=cfg["ulm_kernel_size"],
                                       factor=cfg["upscale"])
        params, history = ulm.unfolded_ulm_train(
            frames, init, sigma_g=cfg["sigma_g"], gamma=cfg["gamma"],
            epochs=cfg["epochs"], lr=cfg["lr"],
            batch_size=cfg["batch_size"], seed=seed, val_data=val)
        values = params.to_values()
    elif what == "agent":
        import warnings
        dataset = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for i in range(cfg["n_scenes"]):
                u, _ = beamform.make_interference_scene(seed + i, cfg["n_elements"])
                cov = beamform.estimate_covariance(u, cfg["n_elements"], 3, 1e-2)
                dataset.append((u[1], beamform.mvdr_weights(cov)))
            params, history = beamform.train_apodization_agent(
                dataset, hidden=(cfg["hidden"], cfg["hidden"]),
                epochs=cfg["epochs"], lr=cfg["lr"],
                batch_size=cfg["batch_size"], seed=seed)
        values = params.to_values()
    else:
        raise ConfigError(f"unknown training target {what!r}")
    print(f"# train {what} took {time.perf_counter()-t0:.3f}s", file=sys.stderr)

    out = args.output
    if emit.dry_run:
        print(f"would write {os.path.join(out, 'manifest.txt')}")
    else:
        nn.save_checkpoint(out, values)
        print(f"wrote {os.path.join(out, 'manifest.txt')}")
    def fmt(v):
        return "-" if v is None else f"{v:.8e}"

    emit.report(os.path.join(out, "history.txt"),
                [(f"epoch_{int(e) + 1}", f"{fmt(tr)} {fmt(va)}")
                 for e, tr, va in history])
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def bench_report():
    n = 128
    mvdr_flops = n ** 3
    net = ulm.init_unfolded_ulm()
    count = net.param_count()
    orders = math.log10(ENCODER_DECODER_REFERENCE_PARAMS / count)
    return [
        ("mvdr_matrix_inversion_flops_n128", mvdr_flops),
        ("mvdr_flop_convention", "N^3 for an NxN Hermitian solve"),
        ("unfolded_ulm_parameters", count),
        ("unfolded_ulm_parameters_cited", 506),
        ("encoder_decoder_reference_parameters", ENCODER_DECODER_REFERENCE_PARAMS),
        ("unfolded_vs_encoder_decoder_orders_of_magnitude", f"{orders:.2f}"),
    ]


def run_bench(args, emit):
    pairs = bench_report()
    t0 = time.perf_counter()
    rng = core.rng(0)
    r = rng.standard_normal((64, 64)) + 1j * rng.standard_normal((64, 64))
    r = r @ r.conj().T + 64 * np.eye(64)
    beamform.mvdr_weights(beamform.CovarianceEstimate(r, 64, 0.0))
    mvdr_ms = (time.perf_counter() - t0) * 1e3
    t0 = time.perf_counter()
    net = ulm.init_unfolded_ulm(k_layers=2, factor=2)
    ulm.unfolded_ulm_forward(np.zeros((16, 16)), net)
    net_ms = (time.perf_counter() - t0) * 1e3
    print(f"# measured: mvdr_weights_64 {mvdr_ms:.2f} ms, "
          f"unfolded_forward_2layer {net_ms:.2f} ms", file=sys.stderr)
    for k, v in pairs:
        print(f"{k} = {v}")
    if args.output:
        emit.report(args.output, pairs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# metrics


METRICS_SCHEMA = {
    "kind": (str, "ulm"), "match_radius": (float, 2.0),
    "support_tol": (float, 1e-12), "log_epsilon": (float, 1e-8),
}


def run_metrics(args, emit):
    file_cfg = parse_config_file(args.config) if args.config else {}
    cfg = resolve_config(METRICS_SCHEMA, file_cfg, {"kind": args.kind})
    log_config("metrics", cfg)
    est = _read_input(args.est)
    truth = _read_input(args.truth)
    kind = cfg["kind"]
    if kind == "ulm":
        if truth.ndim == 3:          # per-frame truth stack: accumulate it
            truth = np.abs(truth).sum(axis=0)
        if est.ndim != 2 or truth.ndim != 2:
            raise DataError("ulm metrics expect 2-D accumulated images")
        m = ulm.ulm_metrics(np.abs(est), np.abs(truth), cfg["match_radius"])
        pairs = [("precision", f"{m.precision:.6f}"),
                 ("recall", f"{m.recall:.6f}"),
                 ("loc_rmse", f"{m.loc_rmse:.6f}"),
                 ("n_estimated", m.n_est), ("n_truth", m.n_truth),
                 ("n_matched", m.n_matched)]
    elif kind == "clutter":
        if est.shape != truth.shape:
            raise DataError("estimate and truth shapes differ")
        rel = np.linalg.norm(est - truth) / max(np.linalg.norm(truth), 1e-300)
        e_on = np.abs(est) > cfg["support_tol"]
        t_on = np.abs(truth) > cfg["support_tol"]
        tp = float(np.sum(e_on & t_on))
        prec = tp / max(e_on.sum(), 1)
        rec = tp / max(t_on.sum(), 1)
        f1 = 2 * prec * rec / max(prec + rec, 1e-300)
        pairs = [("rel_error", f"{rel:.6f}"), ("support_precision", f"{prec:.6f}"),
                 ("support_recall", f"{rec:.6f}"), ("support_f1", f"{f1:.6f}")]
    elif kind == "doppler":
        if est.shape != truth.shape:
            raise DataError("estimate and truth shapes differ")
        eps = cfg["log_epsilon"]
        if np.any(est.real < 0) or np.any(truth.real < 0):
            raise DataError("spectra must be nonnegative")
        msle = float(np.mean((np.log(est.real + eps) - np.log(truth.real + eps)) ** 2))
        pairs = [("msle", f"{msle:.6e}")]
    else:
        raise ConfigError(f"unknown metrics kind {kind!r}")
    if args.output:
        emit.report(args.output, pairs)
    else:
        for k, v in pairs:
            print(f"{k} = {v}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# dispatch


def build_parser():
    p = argparse.ArgumentParser(prog="echokit",
                                description="Ultrasound toolkit pipelines")
    sub = p.add_subparsers(dest="subcommand", required=True)

    def common(sp, output=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1,
                        help="reserved for frame-level fan-out; numerics are "
                             "pinned single-threaded for reproducibility")
        sp.add_argument("--dry-run", action="store_true")
        if output:
            sp.add_argument("-o", "--output", required=True)

    sp = sub.add_parser("sim", help="synthesize desk-scale datasets")
    sp.add_argument("--preset", required=True)
    common(sp)

    sp = sub.add_parser("beamform", help="delay-and-sum / adaptive imaging")
    sp.add_argument("-i", "--input", required=True)
    sp.add_argument("--method", choices=("das", "mvdr"))
    sp.add_argument("--dynamic-range", type=float, default=None)
    common(sp)

    sp = sub.add_parser("doppler", help="spectral velocity estimation")
    sp.add_argument("-i", "--input", required=True)
    sp.add_argument("--estimator", choices=("welch", "capon"))
    common(sp)

    sp = sub.add_parser("clutter", help="tissue/blood separation")
    sp.add_argument("-i", "--input", required=True)
    sp.add_argument("--method", choices=("svd", "fista", "corona"))
    sp.add_argument("--rank", type=int, default=None)
    sp.add_argument("--lambda1", type=float, default=None)
    sp.add_argument("--lambda2", type=float, default=None)
    sp.add_argument("--layers", type=int, default=None)
    sp.add_argument("--checkpoint")
    sp.add_argument("--truth", help="S ground-truth movie for the report")
    common(sp)

    sp = sub.add_parser("ulm", help="super-resolution localization")
    sp.add_argument("-i", "--input", required=True)
    sp.add_argument("--method", choices=("classic", "ista", "fista", "unfolded"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--truth", help="high-res spike stack for metrics")
    common(sp)

    sp = sub.add_parser("train", help="fit unfolded nets / the apodization agent")
    sp.add_argument("--what", choices=("corona", "ulm", "agent"))
    common(sp)

    sp = sub.add_parser("bench", help="FLOP / parameter accounting")
    sp.add_argument("-o", "--output")
    sp.add_argument("--dry-run", action="store_true")

    sp = sub.add_parser("metrics", help="compare artifacts against ground truth")
    sp.add_argument("--kind", choices=("ulm", "clutter", "doppler"))
    sp.add_argument("--est", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--config", help="key = value config file")
    sp.add_argument("-o", "--output")
    sp.add_argument("--dry-run", action="store_true")

    return p


RUNNERS = {
    "sim": run_sim, "beamform": run_beamform, "doppler": run_doppler,
    "clutter": run_clutter, "ulm": run_ulm, "train": run_train,
    "bench": run_bench, "metrics": run_metrics,
}


def run(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    emit = Emitter(getattr(args, "dry_run", False))
    # BLAS/LAPACK reductions reorder sums across threads, which breaks
    # byte-identical artifacts; pin them while numerics run.
    with threadpool_limits(limits=1):
        return RUNNERS[args.subcommand](args, emit)


def main(argv=None):
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except ConfigError as exc:
        print(f"echokit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"echokit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, nn.TrainingDiverged) as exc:
        print(f"echokit: numerical error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:   # pragma: no cover - defensive
        print(f"echokit: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
