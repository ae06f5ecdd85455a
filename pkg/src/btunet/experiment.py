"""Experiment grid: (variant x BT x label fraction x fold x seed) cells.

Each cell optionally pre-trains the encoder (cached per variant/seed),
transfers it into a fresh model, fine-tunes against the cell's validation
fold, and evaluates on the held-out test split. Rows land in
`out/runs/<key>.json` keyed by a config digest, so an interrupted grid
resumes without repeating finished cells. `report.csv` / `report.json`
aggregate fold/seed means per (variant, bt, fraction).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import engine as E
from .checkpoint import Checkpoint
from .data import limit_labels, load_dataset, load_image_stack, make_folds, split
from .errors import ConfigError
from .models import ModelArchConfig, Variant, build_encoder, build_model
from .optim import TrainConfig
from .selfsup import BTConfig, build_projection_head, pretrain
from .train import evaluate, finetune, transfer_encoder

METRIC_KEYS = ("precision", "dc", "miou")
CSV_COLUMNS = ("variant", "bt", "fraction", "fold", "seed",
               "precision", "dc", "miou", "epochs", "wall_s")


@dataclass(frozen=True)
class DatasetSettings:
    root: str
    train_frac: float = 0.70
    image_size: int = 256


@dataclass(frozen=True)
class PretrainSettings:
    lambda_: float = 0.2
    crop_scale: tuple[float, float] = (0.6, 1.0)
    rotation_degrees: tuple[float, float] = (-30.0, 30.0)
    epochs: int = 100
    batch_size: int = 16


@dataclass(frozen=True)
class FinetuneSettings:
    learning_rate: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    early_stop_patience: int = 12
    max_epochs: int = 100
    batch_size: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSettings
    variants: tuple[Variant, ...] = (Variant.UNET,)
    bt: tuple[bool, ...] = (False, True)
    fractions: tuple[float, ...] = (0.2,)
    folds_k: int = 5
    seeds: tuple[int, ...] = (0,)
    pretrain: PretrainSettings = PretrainSettings()
    finetune: FinetuneSettings = FinetuneSettings()

    def __post_init__(self):
        if not self.variants:
            raise ConfigError("variants list is empty")
        if not self.bt:
            raise ConfigError("bt list is empty")
        if not all(isinstance(b, bool) for b in self.bt):
            raise ConfigError("bt entries must be booleans")
        if not self.fractions or not all(0.0 < f <= 1.0 for f in self.fractions):
            raise ConfigError("fractions must be in (0, 1]")
        if self.folds_k < 2:
            raise ConfigError("folds_k must be >= 2")
        if not self.seeds:
            raise ConfigError("seeds list is empty")

    def digest(self) -> str:
        """Hash of the per-cell settings; grid axes excluded so a grown
        grid still reuses completed runs."""
        payload = {
            "dataset": asdict(self.dataset),
            "pretrain": asdict(self.pretrain),
            "finetune": asdict(self.finetune),
            "folds_k": self.folds_k,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _take(table: dict, key: str, default, where: str):
    value = table.pop(key, None)
    return default if value is None else value


def _reject_unknown(table: dict, where: str) -> None:
    if table:
        raise ConfigError(f"unknown keys in {where}: {sorted(table)}")


def parse_experiment_config(source) -> ExperimentConfig:
    """Parse and strictly validate a JSON experiment config (path or dict)."""
    if isinstance(source, (str, Path)):
        try:
            raw = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read experiment config {source}: {exc}") from exc
    else:
        raw = dict(source)
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a JSON object")
    raw = dict(raw)

    ds_raw = raw.pop("dataset", None)
    if not isinstance(ds_raw, dict) or "root" not in ds_raw:
        raise ConfigError("config needs a dataset object with a root path")
    ds_raw = dict(ds_raw)
    dataset = DatasetSettings(
        root=str(ds_raw.pop("root")),
        train_frac=float(_take(ds_raw, "train_frac", 0.70, "dataset")),
        image_size=int(_take(ds_raw, "image_size", 256, "dataset")),
    )
    _reject_unknown(ds_raw, "dataset")

    pt_raw = dict(raw.pop("pretrain", {}))
    pretrain_settings = PretrainSettings(
        lambda_=float(_take(pt_raw, "lambda", 0.2, "pretrain")),
        crop_scale=tuple(_take(pt_raw, "crop_scale", (0.6, 1.0), "pretrain")),
        rotation_degrees=tuple(_take(pt_raw, "rotation_degrees", (-30.0, 30.0), "pretrain")),
        epochs=int(_take(pt_raw, "epochs", 100, "pretrain")),
        batch_size=int(_take(pt_raw, "batch_size", 16, "pretrain")),
    )
    _reject_unknown(pt_raw, "pretrain")

    ft_raw = dict(raw.pop("finetune", {}))
    finetune_settings = FinetuneSettings(
        learning_rate=float(_take(ft_raw, "learning_rate", 1e-3, "finetune")),
        plateau_factor=float(_take(ft_raw, "plateau_factor", 0.1, "finetune")),
        plateau_patience=int(_take(ft_raw, "plateau_patience", 5, "finetune")),
        early_stop_patience=int(_take(ft_raw, "early_stop_patience", 12, "finetune")),
        max_epochs=int(_take(ft_raw, "max_epochs", 100, "finetune")),
        batch_size=int(_take(ft_raw, "batch_size", 8, "finetune")),
    )
    _reject_unknown(ft_raw, "finetune")

    cfg = ExperimentConfig(
        dataset=dataset,
        variants=tuple(Variant.parse(v) for v in _take(raw, "variants", ["unet"], "config")),
        bt=tuple(_take(raw, "bt", [False, True], "config")),
        fractions=tuple(float(f) for f in _take(raw, "fractions", [0.2], "config")),
        folds_k=int(_take(raw, "folds_k", 5, "config")),
        seeds=tuple(int(s) for s in _take(raw, "seeds", [0], "config")),
        pretrain=pretrain_settings,
        finetune=finetune_settings,
    )
    _reject_unknown(raw, "config")
    return cfg


def derive_seed(seed: int, *tags: str) -> int:
    return int(E.rng_for(seed, *tags).integers(0, 2**31 - 1))


def dataset_channels(root) -> int:
    """1 for grayscale sources, 3 otherwise, probed from the first image."""
    from PIL import Image

    first = load_dataset(root).records[0]
    with Image.open(first.image_path) as img:
        return 1 if img.mode in ("L", "I;16", "1") else 3


def make_arch(cfg: ExperimentConfig, variant: Variant, seed: int, role: str,
              channels: int) -> ModelArchConfig:
    return ModelArchConfig(
        variant=variant,
        input_size=cfg.dataset.image_size,
        input_channels=channels,
        seed=derive_seed(seed, variant.value, role),
    )


def run_key(variant: Variant, bt: bool, fraction: float, fold: int, seed: int,
            digest: str) -> str:
    text = f"{variant.value}|bt={int(bt)}|fr={fraction:.6f}|fold={fold}|seed={seed}|{digest}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class ExperimentRunner:
    def __init__(self, cfg: ExperimentConfig, out_dir, log_fn=None):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.runs_dir = self.out / "runs"
        self.ckpt_dir = self.out / "ckpts"
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        self.log = log_fn or (lambda msg: None)
        self.digest = cfg.digest()
        self._manifests: dict = {}
        self._channels: int | None = None

    # -- data ------------------------------------------------------------

    def manifest_for(self, seed: int, fraction: float):
        key = (seed, round(fraction, 9))
        if key not in self._manifests:
            m = load_dataset(self.cfg.dataset.root)
            m = split(m, self.cfg.dataset.train_frac, seed=derive_seed(seed, "split"))
            m = limit_labels(m, fraction, seed=derive_seed(seed, "labels"))
            m = make_folds(m, self.cfg.folds_k, seed=derive_seed(seed, "folds"))
            self._manifests[key] = m
        return self._manifests[key]

    def channels(self) -> int:
        if self._channels is None:
            self._channels = dataset_channels(self.cfg.dataset.root)
        return self._channels

    def arch_for(self, variant: Variant, seed: int, role: str) -> ModelArchConfig:
        return make_arch(self.cfg, variant, seed, role, self.channels())

    # -- phases ------------------------------------------------------------

    def pretrained_checkpoint(self, variant: Variant, seed: int) -> Checkpoint:
        path = self.ckpt_dir / f"pretrain_{variant.value}_seed{seed}_{self.digest}.ckpt"
        if path.exists():
            return Checkpoint.load(path)
        self.log(f"[pretrain] {variant.value} seed={seed}")
        # labels are ignored here, so the manifest needs only the split
        manifest = split(
            load_dataset(self.cfg.dataset.root),
            self.cfg.dataset.train_frac,
            seed=derive_seed(seed, "split"),
        )
        images = load_image_stack(
            manifest.pretrain_records(), self.cfg.dataset.image_size, self.channels()
        )
        encoder = build_encoder(self.arch_for(variant, seed, "pretrain-init"))
        bt_cfg = BTConfig(
            lambda_=self.cfg.pretrain.lambda_,
            crop_scale=self.cfg.pretrain.crop_scale,
            rotation_degrees=self.cfg.pretrain.rotation_degrees,
            batch_size=self.cfg.pretrain.batch_size,
            epochs=self.cfg.pretrain.epochs,
            seed=derive_seed(seed, "augment"),
        )
        head = build_projection_head(encoder, bt_cfg)
        train_cfg = TrainConfig(
            learning_rate=self.cfg.finetune.learning_rate,
            plateau_factor=self.cfg.finetune.plateau_factor,
            plateau_patience=self.cfg.finetune.plateau_patience,
            early_stop_patience=self.cfg.finetune.early_stop_patience,
            max_epochs=self.cfg.pretrain.epochs,
            batch_size=self.cfg.pretrain.batch_size,
            seed=derive_seed(seed, "pretrain-loop"),
        )
        result = pretrain(encoder, head, images, bt_cfg, train_cfg, log_fn=None)
        result.checkpoint.save(path)
        return result.checkpoint

    def run_cell(self, variant: Variant, bt: bool, fraction: float, fold: int,
                 seed: int) -> dict:
        key = run_key(variant, bt, fraction, fold, seed, self.digest)
        row_path = self.runs_dir / f"{key}.json"
        if row_path.exists():
            row = json.loads(row_path.read_text())
            if row.get("status") == "ok":
                self.log(f"[skip] {key} already complete")
                return row
        started = time.monotonic()
        row = {
            "key": key,
            "variant": variant.value,
            "bt": bt,
            "fraction": fraction,
            "fold": fold,
            "seed": seed,
            "status": "ok",
        }
        try:
            manifest = self.manifest_for(seed, fraction)
            model = build_model(self.arch_for(variant, seed, "init"))
            if bt:
                transfer_encoder(self.pretrained_checkpoint(variant, seed), model)
            ft = self.cfg.finetune
            train_cfg = TrainConfig(
                learning_rate=ft.learning_rate,
                plateau_factor=ft.plateau_factor,
                plateau_patience=ft.plateau_patience,
                early_stop_patience=ft.early_stop_patience,
                max_epochs=ft.max_epochs,
                batch_size=ft.batch_size,
                seed=derive_seed(seed, variant.value, f"finetune-f{fold}"),
            )
            result = finetune(model, manifest, train_cfg, val_fold=fold)
            result.checkpoint.save(self.ckpt_dir / f"finetune_{key}.ckpt")
            metrics = evaluate(model, manifest, batch_size=ft.batch_size)
            row.update(
                precision=metrics["precision"],
                dc=metrics["dc"],
                miou=metrics["miou"],
                epochs=result.epochs_run,
                best_val_loss=result.best_val_loss,
            )
        except Exception as exc:  # record the failure, keep the grid going
            row.update(status="error", error=f"{type(exc).__name__}: {exc}")
        row["wall_s"] = round(time.monotonic() - started, 3)
        row_path.write_text(json.dumps(row, sort_keys=True, indent=1))
        self.log(
            f"[cell] {variant.value} bt={bt} fraction={fraction} fold={fold} "
            f"seed={seed}: {row.get('dc', row.get('error'))}"
        )
        return row

    def run(self) -> dict:
        rows = []
        for variant in self.cfg.variants:
            for bt in self.cfg.bt:
                for fraction in self.cfg.fractions:
                    for seed in self.cfg.seeds:
                        for fold in range(self.cfg.folds_k):
                            rows.append(self.run_cell(variant, bt, fraction, fold, seed))
        report = build_report(rows, self.digest)
        write_reports(report, self.out)
        return report


# -- reporting -----------------------------------------------------------------


def _sort_key(row: dict):
    return (row["variant"], row["bt"], row["fraction"], row["seed"], row["fold"])


def build_report(rows: list[dict], digest: str) -> dict:
    rows = sorted(rows, key=_sort_key)
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        if row.get("status") != "ok":
            continue
        groups.setdefault((row["variant"], row["bt"], row["fraction"]), []).append(row)
    aggregates = []
    for (variant, bt, fraction), members in sorted(groups.items()):
        entry = {"variant": variant, "bt": bt, "fraction": fraction, "n_runs": len(members)}
        for key in METRIC_KEYS:
            values = np.array([m[key] for m in members], dtype=np.float64)
            entry[f"{key}_mean"] = float(values.mean())
            entry[f"{key}_std"] = float(values.std())
        aggregates.append(entry)
    return {"config_digest": digest, "rows": rows, "aggregates": aggregates}


def report_csv_text(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in report["rows"]:
        if row.get("status") != "ok":
            continue
        writer.writerow(
            [
                row["variant"],
                "true" if row["bt"] else "false",
                f"{row['fraction']:.4f}",
                row["fold"],
                row["seed"],
                f"{row['precision']:.6f}",
                f"{row['dc']:.6f}",
                f"{row['miou']:.6f}",
                row["epochs"],
                f"{row['wall_s']:.3f}",
            ]
        )
    return buf.getvalue()


def write_reports(report: dict, out_dir) -> None:
    out = Path(out_dir)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    (out / "report.csv").write_text(report_csv_text(report))


def collect_rows(out_dir) -> list[dict]:
    runs = Path(out_dir) / "runs"
    if not runs.is_dir():
        raise ConfigError(f"no runs/ directory under {out_dir}")
    return [json.loads(p.read_text()) for p in sorted(runs.glob("*.json"))]


def run_experiment(config, out_dir, log_fn=None) -> dict:
    cfg = config if isinstance(config, ExperimentConfig) else parse_experiment_config(config)
    return ExperimentRunner(cfg, out_dir, log_fn=log_fn).run()
