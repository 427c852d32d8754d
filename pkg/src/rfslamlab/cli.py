"""Reproduction driver.

Subcommands chain dataset generation -> CSI synthesis -> feature
extraction -> training -> evaluation through files in a run directory,
with presets for the reference experiment configurations.

    rf-slam-lab gen|extract|train|eval|ablate [--preset P] [--config F] ...

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 acceptance-preset target missed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, asdict, fields

import numpy as np

from . import channel, datagen, evaluate, nn, slam, superres
from .geometry import C, Scene, box_room, rectangle_room
from .superres import FeatureSet

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_TARGET_MISS = 4


@dataclass
class ExperimentConfig:
    """Resolved settings for one experiment, JSON round-trippable."""

    scene: str = "2d-room"
    n_samples: int = 4000
    max_bounce: int = 1
    margin: float = 0.25
    seed: int = 0
    carrier_hz: float = 2e9
    bandwidth_hz: float = 400e6
    n_subcarriers: int = 128
    snapshots: int = 16
    snr_db: float | None = None
    source: str = "genie"      # genie | music
    modality: str = "tof"      # tof | tdoa
    encoder: str = "mlp"       # mlp | conv | deepset
    epochs: int = 300
    batch_size: int = 64
    lr: float = 3e-3
    loss_kind: str = "hungarian"
    n_vas: int = 8
    n_restarts: int = 3
    va_init_scale: float = 5.0
    pretrain_epochs: int = 40
    labeled: int = 32
    out: str = "runs/exp"
    target_median: float | None = None

    def ofdm(self) -> channel.OfdmConfig:
        return channel.OfdmConfig(carrier_hz=self.carrier_hz,
                                  bandwidth_hz=self.bandwidth_hz,
                                  n_subcarriers=self.n_subcarriers,
                                  snapshots=self.snapshots,
                                  snr_db=self.snr_db)

    def train_config(self) -> slam.TrainConfig:
        return slam.TrainConfig(epochs=self.epochs,
                                batch_size=self.batch_size, lr=self.lr,
                                loss_kind=self.loss_kind, n_vas=self.n_vas,
                                seed=self.seed, modality=self.modality,
                                va_init_scale=self.va_init_scale,
                                n_restarts=self.n_restarts,
                                pretrain_epochs=self.pretrain_epochs)


PRESETS = {
    # dataset-scale presets (reference system parameters)
    "2d": {"scene": "2d-room", "n_samples": 4000,
           "carrier_hz": 2e9, "bandwidth_hz": 400e6},
    "3d": {"scene": "3d-box", "n_samples": 13000,
           "carrier_hz": 3.5e9, "bandwidth_hz": 100e6, "n_vas": 6},
    # desk-scale experiment presets
    "table4-mlp-2d": {"scene": "2d-room", "n_samples": 2000,
                      "carrier_hz": 2e9, "bandwidth_hz": 400e6,
                      "source": "genie", "modality": "tof",
                      "encoder": "mlp", "n_vas": 8,
                      "target_median": 0.05},
    "table4-conv-2d": {"scene": "2d-room", "n_samples": 2000,
                       "carrier_hz": 2e9, "bandwidth_hz": 400e6,
                       "source": "genie", "modality": "tof",
                       "encoder": "conv", "n_vas": 8},
    "table4-deepset-2d": {"scene": "2d-room", "n_samples": 2000,
                          "carrier_hz": 2e9, "bandwidth_hz": 400e6,
                          "source": "genie", "modality": "tof",
                          "encoder": "deepset", "n_vas": 8},
    "table4-mlp-3d": {"scene": "3d-box", "n_samples": 4000,
                      "carrier_hz": 3.5e9, "bandwidth_hz": 100e6,
                      "source": "genie", "modality": "tof",
                      "encoder": "mlp", "n_vas": 6,
                      "target_median": 0.15},
    "table3-genie-tdoa-2d": {"scene": "2d-room", "n_samples": 2000,
                             "carrier_hz": 2e9, "bandwidth_hz": 400e6,
                             "source": "genie", "modality": "tdoa",
                             "encoder": "mlp", "n_vas": 8},
    "table3-music-tdoa-2d": {"scene": "2d-room", "n_samples": 2000,
                             "carrier_hz": 2e9, "bandwidth_hz": 400e6,
                             "source": "music", "modality": "tdoa",
                             "encoder": "mlp", "n_vas": 8,
                             "target_median": 0.30},
}


# Distinct per-wall materials: with equal coefficients both preset rooms
# are exactly mirror-symmetric about a plane through the anchor, making
# the position map 2-to-1 for any delay-only observable.  Distinct wall
# gains keep the geometry identical but let CSI magnitudes tell the two
# mirror half-spaces apart.
GAMMAS_2D = (0.9, 0.8, 0.6, 0.5)
GAMMAS_3D = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4)


def build_scene(cfg: ExperimentConfig) -> Scene:
    if cfg.scene == "2d-room":
        return rectangle_room(5.0, 5.0, (0.1, 0.1), gamma=GAMMAS_2D)
    if cfg.scene == "3d-box":
        return box_room((-10.2, -5.0, 0.0), (0.0, 5.0, 4.2),
                        (-10.0, 0.0, 4.0), gamma=GAMMAS_3D)
    raise ValueError(f"unknown scene preset {cfg.scene!r}")


def resolve_config(args) -> ExperimentConfig:
    """Preset < config file < command-line flags, in increasing priority."""
    values = {}
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise ValueError(f"unknown preset {args.preset!r}; choose from "
                             f"{sorted(PRESETS)}")
        values.update(PRESETS[args.preset])
    if getattr(args, "config", None):
        with open(args.config) as f:
            loaded = json.load(f)
        names = {f.name for f in fields(ExperimentConfig)}
        unknown = set(loaded) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    env_seed = os.environ.get("RFSLAM_SEED")
    if env_seed is not None and "seed" not in values:
        values["seed"] = int(env_seed)
    overrides = {
        "n_samples": args.samples, "epochs": args.epochs,
        "n_restarts": args.restarts, "seed": args.seed,
        "snr_db": args.snr, "bandwidth_hz": args.bandwidth,
        "n_vas": args.vas, "encoder": args.encoder,
        "source": args.source, "modality": args.modality,
        "loss_kind": args.loss, "out": args.out,
        "n_samples_override": None,
    }
    overrides.pop("n_samples_override")
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    cfg = ExperimentConfig(**values)
    if cfg.source not in ("genie", "music"):
        raise ValueError("source must be 'genie' or 'music'")
    if cfg.encoder not in ("mlp", "conv", "deepset"):
        raise ValueError("unknown encoder kind")
    return cfg


def _needs_csi(cfg: ExperimentConfig) -> bool:
    return cfg.source == "music" or cfg.encoder == "conv"


def _paths(cfg: ExperimentConfig) -> dict:
    return {name: os.path.join(cfg.out, name) for name in
            ("dataset.jsonl", "csi.bin", "features.jsonl", "experiment.json",
             "metrics.json", "cdf.csv", "pointcloud.json")}


def _write_experiment(cfg: ExperimentConfig):
    os.makedirs(cfg.out, exist_ok=True)
    with open(_paths(cfg)["experiment.json"], "w") as f:
        json.dump(asdict(cfg), f, indent=2)


def cmd_gen(cfg: ExperimentConfig) -> int:
    scene = build_scene(cfg)
    ds = datagen.generate_dataset(scene, datagen.DatagenConfig(
        n_samples=cfg.n_samples, max_bounce=cfg.max_bounce,
        margin=cfg.margin, seed=cfg.seed))
    p = _paths(cfg)
    _write_experiment(cfg)
    datagen.write_dataset(p["dataset.jsonl"], ds)
    print(f"wrote {cfg.n_samples} samples to {p['dataset.jsonl']}")
    if _needs_csi(cfg):
        ofdm = cfg.ofdm()
        csi = [channel.synthesize(s.paths, ofdm, seed=cfg.seed * 100_000 + i)
               for i, s in enumerate(ds.samples)]
        channel.write_csi(p["csi.bin"], csi, ofdm)
        print(f"wrote CSI tensor to {p['csi.bin']}")
    return EXIT_OK


def cmd_extract(cfg: ExperimentConfig) -> int:
    p = _paths(cfg)
    ds = datagen.read_dataset(p["dataset.jsonl"])
    rows = []
    if cfg.source == "genie":
        for s in ds.samples:
            values = datagen.to_tdoa(s) if cfg.modality == "tdoa" \
                else s.tofs()
            rows.append((list(map(float, values)), None))
    else:
        csi_list, ofdm = channel.read_csi(p["csi.bin"])
        grid = superres.default_grid(ofdm, ds.scene.diameter(),
                                     cfg.max_bounce)
        ecfg = superres.ExtractConfig(grid=grid, max_order=cfg.n_vas)
        from .geometry import image_sources
        n_paths = len(image_sources(ds.scene, cfg.max_bounce)) + 1
        max_range = C * grid.t_max
        rel_max = superres.amplitude_rel_max(cfg.snr_db, cfg.snapshots)
        for h in csi_list:
            try:
                fs = superres.extract_features(h, ecfg,
                                               ofdm.subcarrier_spacing,
                                               modality="tof")
            except superres.FeatureExtractionError:
                rows.append(([], None))  # downstream skips empty rows
                continue
            taus, amps, rel = superres.refine_paths(
                h, fs.values, ofdm.subcarrier_spacing)
            ranges = superres.path_ranges(taus, amps, n_paths, max_range,
                                          rel, rel_max=rel_max)
            values = taus if ranges is not None else fs.values
            if cfg.modality == "tdoa":
                values = values - values[0]
            rows.append((list(map(float, values)),
                         None if ranges is None
                         else list(map(float, ranges))))
    with open(p["features.jsonl"], "w") as f:
        f.write(json.dumps({"modality": cfg.modality, "source": cfg.source,
                            "n": len(rows)}) + "\n")
        for values, ranges in rows:
            f.write(json.dumps({"values": values, "ranges": ranges}) + "\n")
    n_ok = sum(1 for values, _ in rows if values)
    print(f"extracted {n_ok}/{len(rows)} feature sets "
          f"to {p['features.jsonl']}")
    return EXIT_OK


def read_features(path):
    """Returns (list of FeatureSet-or-None, modality)."""
    with open(path) as f:
        header = json.loads(f.readline())
        out = []
        for line in f:
            rec = json.loads(line)
            if rec["values"]:
                ranges = rec.get("ranges")
                out.append(FeatureSet(
                    values=np.asarray(rec["values"]),
                    modality=header["modality"],
                    ranges=None if ranges is None else np.asarray(ranges)))
            else:
                out.append(None)
    return out, header["modality"]


def _encoder_factory(cfg: ExperimentConfig, scene: Scene):
    dim = scene.dim
    if cfg.encoder == "mlp":
        n_inputs = _mlp_width(cfg, scene)
        return lambda rng: slam.build_encoder("mlp", dim, rng,
                                              n_inputs=n_inputs)
    if cfg.encoder == "conv":
        return lambda rng: slam.build_encoder(
            "conv", dim, rng, n_subcarriers=cfg.n_subcarriers)
    return lambda rng: slam.build_encoder("deepset", dim, rng)


def _mlp_width(cfg: ExperimentConfig, scene: Scene) -> int:
    if cfg.source == "music" or cfg.modality == "tof":
        from .geometry import image_sources
        return len(image_sources(scene, cfg.max_bounce)) + 1
    return cfg.n_vas + 1


def build_inputs(cfg: ExperimentConfig, scene: Scene, samples, features,
                 csi_list=None):
    """Per-sample encoder inputs aligned with ``samples``."""
    if cfg.encoder == "conv":
        return [slam.csi_input(h) for h in csi_list]
    if cfg.encoder == "deepset":
        return [None if f is None else slam.set_input(f) for f in features]
    width = _mlp_width(cfg, scene)
    if cfg.source == "genie" and cfg.modality == "tof":
        return [slam.tof_input(s, width - 1) for s in samples]
    if cfg.source == "music":
        # amplitude-identified range vectors; samples where the
        # identification was rejected are skipped downstream.  When
        # identification fails for most samples (insufficient bandwidth,
        # heavy noise), fall back to sorted delay vectors wholesale so
        # every sample keeps the same input semantics.
        usable = [f for f in features if f is not None]
        n_ranged = sum(1 for f in usable if f.ranges is not None)
        if usable and n_ranged >= 0.5 * len(usable):
            return [None if f is None else slam.ranged_input(f, width)
                    for f in features]
    return [None if f is None else slam.feature_input(f, width)
            for f in features]


def cmd_train(cfg: ExperimentConfig) -> int:
    p = _paths(cfg)
    ds = datagen.read_dataset(p["dataset.jsonl"])
    features, _ = read_features(p["features.jsonl"])
    csi_list = None
    if cfg.encoder == "conv":
        csi_list, _ = channel.read_csi(p["csi.bin"])
    inputs = build_inputs(cfg, ds.scene, ds.samples, features, csi_list)
    n_train = len(ds.train)
    usable = [i for i in range(n_train)
              if features[i] is not None and inputs[i] is not None]
    train_feats = [features[i] for i in usable]
    train_inputs = [inputs[i] for i in usable]
    labeled = [j for j, i in enumerate(usable) if i < cfg.labeled]
    labeled_pos = np.stack([ds.samples[usable[j]].user for j in labeled])
    tcfg = cfg.train_config()
    try:
        model, history, _ = slam.train_restarts(
            train_feats, train_inputs, tcfg, ds.scene.dim,
            _encoder_factory(cfg, ds.scene),
            labeled_indices=labeled, labeled_positions=labeled_pos)
    except slam.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    # map polish: closed-form calibration when the inputs are identity-
    # ordered range vectors, per-anchor multilateration otherwise
    calibrated = None
    if train_inputs and all(np.asarray(x).ndim == 1
                            and np.all(np.asarray(x) > 0.0)
                            for x in train_inputs):
        calibrated = slam.calibrate_from_ranges(
            model, np.stack(train_inputs), inputs=train_inputs,
            distill_epochs=2 * cfg.pretrain_epochs, cfg=tcfg)
    if calibrated is None:
        slam.refine_vas(model, train_feats, train_inputs)
    retained = slam.prune_vas(model, train_feats, train_inputs)
    slam.save_run(cfg.out, model, tcfg, history, retained=retained)
    _write_experiment(cfg)
    print(f"final loss {history[-1]:.3e}, retained "
          f"{len(retained) - 1}/{model.n_vas} virtual anchors -> {cfg.out}")
    return EXIT_OK


def _load_model(cfg: ExperimentConfig, scene: Scene) -> slam.SlamModel:
    rng = np.random.default_rng(0)
    model = slam.SlamModel(_encoder_factory(cfg, scene)(rng), scene.dim,
                           cfg.n_vas, rng, modality=cfg.modality)
    nn.load_checkpoint(os.path.join(cfg.out, "encoder.ckpt"), model.encoder)
    model.va[...] = np.load(os.path.join(cfg.out, "va_coords.npy"))
    return model


def cmd_eval(cfg: ExperimentConfig) -> int:
    p = _paths(cfg)
    ds = datagen.read_dataset(p["dataset.jsonl"])
    features, _ = read_features(p["features.jsonl"])
    csi_list = None
    if _needs_csi(cfg):
        csi_list, _ = channel.read_csi(p["csi.bin"])
    inputs = build_inputs(cfg, ds.scene, ds.samples, features, csi_list)
    model = _load_model(cfg, ds.scene)
    with open(os.path.join(cfg.out, "retained_vas.json")) as f:
        retained = json.load(f)["retained"]

    labeled = [i for i in range(len(ds.train)) if inputs[i] is not None]
    labeled = labeled[: cfg.labeled]
    pred_lab = slam.predict_positions(model, [inputs[i] for i in labeled])
    try:
        fit = evaluate.fit_isometry(
            pred_lab, np.stack([ds.samples[i].user for i in labeled]))
    except ValueError as exc:  # collapsed model: degenerate predictions
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    n_train = len(ds.train)
    test_idx = [i for i in range(n_train, len(ds.samples))
                if inputs[i] is not None]
    if not test_idx:
        print("no evaluable test samples", file=sys.stderr)
        return EXIT_NUMERICAL
    pred = slam.predict_positions(model, [inputs[i] for i in test_idx])
    truth = np.stack([ds.samples[i].user for i in test_idx])
    pos_stats = evaluate.position_errors(pred, truth, fit)
    true_vas = datagen.true_virtual_anchors(ds.scene, cfg.max_bounce)
    va_stats, unmatched = evaluate.va_errors(model.va[retained], true_vas,
                                             fit)
    metrics = evaluate.write_metrics(p["metrics.json"], pos_stats, va_stats,
                                     unmatched, fit)
    evaluate.export_cdf(pos_stats.errors, p["cdf.csv"])
    if csi_list is not None:
        mags = [channel.magnitude_summary(csi_list[i]) for i in test_idx]
    else:
        mags = [float(np.log10(np.abs(ds.samples[i].paths[0].gain)))
                for i in test_idx]
    evaluate.export_pointcloud(pred, mags, model.va[retained],
                               p["pointcloud.json"])
    print(json.dumps(metrics, indent=2))
    if cfg.target_median is not None and \
            pos_stats.median > cfg.target_median:
        print(f"target median {cfg.target_median} m missed "
              f"({pos_stats.median:.3f} m)", file=sys.stderr)
        return EXIT_TARGET_MISS
    return EXIT_OK


def _run_pipeline(cfg: ExperimentConfig) -> tuple[int, dict]:
    for step in (cmd_gen, cmd_extract, cmd_train):
        code = step(cfg)
        if code != EXIT_OK:
            return code, {}
    code = cmd_eval(cfg)
    if code not in (EXIT_OK, EXIT_TARGET_MISS):
        return code, {}
    with open(_paths(cfg)["metrics.json"]) as f:
        return EXIT_OK, json.load(f)


ABLATION_KINDS = ("setloss", "vacount", "bandwidth", "snr")


def cmd_ablate(kind: str, cfg: ExperimentConfig) -> int:
    """Run a one-axis sweep and write summary.csv under the out dir."""
    base = asdict(cfg)
    base["target_median"] = None
    rows = []
    if kind == "setloss":
        sweep = [("loss_kind", k) for k in
                 ("hungarian", "chamfer", "hausdorff", "greedy")]
    elif kind == "vacount":
        sweep = [("n_vas", m) for m in (6, 15, 25)]
    elif kind == "bandwidth":
        base.update({"source": "music"})
        sweep = [("bandwidth_hz", b) for b in (100e6, 300e6, 400e6)]
    elif kind == "snr":
        base.update({"source": "music"})
        sweep = [("snr_db", s) for s in (0.0, 10.0, 20.0, None)]
    else:
        raise ValueError(f"unknown ablation kind {kind!r}")
    root = cfg.out
    for key, val in sweep:
        sub = dict(base)
        sub[key] = val
        sub["out"] = os.path.join(root, f"{key}-{val}")
        code, metrics = _run_pipeline(ExperimentConfig(**sub))
        if code != EXIT_OK:
            return code
        rows.append((f"{key}={val}", metrics))
        print(f"{key}={val}: median {metrics['median']:.3f} m")
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "summary.csv"), "w") as f:
        f.write("setting,median,q90,va_median,alignment_residual\n")
        for name, m in rows:
            f.write(f"{name},{m['median']:.6g},{m['q90']:.6g},"
                    f"{m.get('va_median', '')},"
                    f"{m.get('alignment_residual', '')}\n")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rf-slam-lab",
        description="Unsupervised RF positioning and mapping laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "extract", "train", "eval", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--samples", type=int, dest="samples")
        p.add_argument("--epochs", type=int)
        p.add_argument("--restarts", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--snr", type=float)
        p.add_argument("--bandwidth", type=float)
        p.add_argument("--vas", type=int)
        p.add_argument("--encoder", choices=("mlp", "conv", "deepset"))
        p.add_argument("--source", choices=("genie", "music"))
        p.add_argument("--modality", choices=("tof", "tdoa"))
        p.add_argument("--loss", choices=("hungarian", "chamfer",
                                          "hausdorff", "greedy"))
        p.add_argument("--out")
        if name == "ablate":
            p.add_argument("--kind", choices=ABLATION_KINDS, required=True)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "extract":
            return cmd_extract(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_ablate(args.kind, cfg)
    except FileNotFoundError as exc:
        print(f"configuration error: missing artifact {exc}",
              file=sys.stderr)
        return EXIT_CONFIG
    except (slam.TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
