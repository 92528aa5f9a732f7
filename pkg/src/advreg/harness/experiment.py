"""End-to-end experiments: data, critic training, reconstructions, baselines, report."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..baselines import TVConfig, fbp, line_search_alpha, tv_reconstruct
from ..nets import Architecture, CriticNetwork, load_weights, save_weights
from ..operators import IdentityOperator, NoiseModel, OperatorSpec, RayTransform, add_noise, operator_norm_sq
from ..reconstruction import SolveConfig, estimate_lambda, reconstruct
from ..training import TrainConfig, TrainLog, pseudo_inverse_samples, train
from .imageio import save_image
from .metrics import psnr, ssim
from .phantoms import PhantomSpec, generate_phantoms

TASKS = ("denoise", "ct")
# TV weights searched when the config gives none; CT data terms live on a much larger scale
DEFAULT_TV_GRID = {"denoise": [0.05, 0.1, 0.15, 0.2, 0.3, 0.4], "ct": [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]}


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


@dataclass
class ExperimentConfig:
    """Everything needed to rerun an experiment bit-identically.

    ``sigma`` is the noise level in measurement units.  ``lam=None``
    selects the data-driven weight ``2 E||A* e||``.  ``seed`` drives
    every stage; per-stage seeds are derived from it.
    """

    task: str = "denoise"
    size: int = 32
    n_angles: int = 30
    delta: float = 1.0
    sigma: float = 0.1
    n_real: int = 400
    n_measured: int = 400
    n_val: int = 8
    n_test: int = 50
    phantom: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    lam: float | None = None
    lam_scale: float = 1.0
    lam_samples: int = 32
    solve: dict = field(default_factory=dict)
    tv_grid: list | None = None
    tv_iterations: int = 300
    output_dir: str = "advreg_run"
    seed: int = 0
    figures: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        for name in ("n_real", "n_measured", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_val < 0:
            raise ValueError("n_val must be >= 0")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.tv_grid is not None and not self.tv_grid:
            raise ValueError("tv_grid must be nonempty")

    # -- derived pieces -----------------------------------------------------

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(**{"size": self.size, **self.phantom, "seed": self.seed})

    def train_config(self) -> TrainConfig:
        d = {"architecture": asdict(Architecture(input_shape=(self.size, self.size, 1))), "delta": self.delta}
        d.update(self.train)
        d.setdefault("seed", self.seed + 2)
        arch = d["architecture"]
        if isinstance(arch, dict):
            arch = dict(arch)
            arch["input_shape"] = tuple(arch.get("input_shape", (self.size, self.size, 1)))
            arch["conv"] = tuple(tuple(c) for c in arch.get("conv", ()))
            arch["dense"] = tuple(arch.get("dense", ()))
            d["architecture"] = asdict(Architecture(**arch))
        return TrainConfig(**d)

    def alpha_grid(self) -> list:
        return list(self.tv_grid) if self.tv_grid is not None else list(DEFAULT_TV_GRID[self.task])

    def solve_config(self, lam: float) -> SolveConfig:
        return SolveConfig(**{**self.solve, "lam": lam})

    def operator(self) -> OperatorSpec:
        if self.task == "denoise":
            return IdentityOperator((self.size, self.size))
        return RayTransform((self.size, self.size), self.n_angles)

    def noise(self) -> NoiseModel:
        return NoiseModel(self.sigma, seed=self.seed + 1)

    def resolved(self) -> "ExperimentConfig":
        """Copy with every derived default written out explicitly."""
        tc = self.train_config().to_dict()
        sc = asdict(SolveConfig(**{**self.solve, "lam": 0.0}))
        sc.pop("lam")
        phantom = self.phantom_spec().to_dict()
        phantom.pop("seed")
        phantom.pop("size")
        return replace(self, train=tc, solve=sc, phantom=phantom, tv_grid=self.alpha_grid())

    def with_seed(self, seed: int) -> "ExperimentConfig":
        train = {k: v for k, v in self.train.items() if k != "seed"}
        return replace(self, seed=int(seed), train=train)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sigma_for_psnr(target_db: float, peak: float = 1.0) -> float:
    """Noise level whose unclipped white noise gives PSNR ``target_db`` against the clean image."""
    return peak * 10.0 ** (-target_db / 20.0)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Disjoint index pools drawn from one phantom stream.

    ``real`` are ground-truth training images, ``measured`` are
    measurements of *other* phantoms (their truths are discarded), and
    the validation and test sets are paired.
    """

    real: np.ndarray
    measured: np.ndarray
    val_truth: np.ndarray
    val_y: np.ndarray
    test_truth: np.ndarray
    test_y: np.ndarray
    index: dict

    def check_unpaired(self) -> None:
        sets = {k: set(v) for k, v in self.index.items()}
        names = list(sets)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                shared = sets[a] & sets[b]
                if shared:
                    raise ValueError(f"pools {a} and {b} share indices {sorted(shared)[:5]}")


def prepare_data(cfg: ExperimentConfig, op: OperatorSpec | None = None) -> Dataset:
    op = op or cfg.operator()
    counts = {"real": cfg.n_real, "measured": cfg.n_measured, "val": cfg.n_val, "test": cfg.n_test}
    total = sum(counts.values())
    images = generate_phantoms(cfg.phantom_spec(), total)
    index, start = {}, 0
    for name, n in counts.items():
        index[name] = list(range(start, start + n))
        start += n
    rng = np.random.default_rng(cfg.noise().seed)
    noise = cfg.noise()

    def measure(idx):
        if not idx:
            return np.zeros((0,) + op.data_shape)
        return np.stack([add_noise(op.apply(images[i]), noise, rng) for i in idx])

    ds = Dataset(
        real=images[index["real"]],
        measured=measure(index["measured"]),
        val_truth=images[index["val"]],
        val_y=measure(index["val"]),
        test_truth=images[index["test"]],
        test_y=measure(index["test"]),
        index=index,
    )
    ds.check_unpaired()
    return ds


# ---------------------------------------------------------------------------
# stability
# ---------------------------------------------------------------------------


@dataclass
class StabilityReport:
    scales: list
    deviations: list
    relative_scales: bool

    @property
    def monotone(self) -> bool:
        """Deviation non-increasing as the perturbation scale shrinks."""
        order = np.argsort(self.scales)[::-1]
        dev = np.asarray(self.deviations)[order]
        return bool(np.all(np.diff(dev) <= 0))

    def rows(self):
        return list(zip(self.scales, self.deviations))


def stability_check(psi, op: OperatorSpec, y, scales, config: SolveConfig, delta: float = 1.0, seed: int = 0, relative: bool = True) -> StabilityReport:
    """Deviation ``||x(y + xi_k) - x(y)||`` for perturbations of norm ``scale_k`` (times ``||y||`` if ``relative``).

    All perturbations share one random direction so the scales are
    directly comparable.
    """
    y = np.asarray(y, dtype=np.float64)
    base, _ = reconstruct(psi, op, y, config, delta)
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(y.shape)
    direction /= np.linalg.norm(direction)
    ref = float(np.linalg.norm(y)) if relative else 1.0
    devs = []
    for s in scales:
        x, _ = reconstruct(psi, op, y + s * ref * direction, config, delta)
        devs.append(float(np.linalg.norm(x - base)))
    return StabilityReport([float(s) for s in scales], devs, relative)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


class _Stage:
    def __init__(self, name, timings):
        self.name = name
        self.timings = timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, et, ev, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if ev is not None and not isinstance(ev, StageError):
            raise StageError(self.name, ev) from ev
        return False


def run_experiment(cfg: ExperimentConfig, net: CriticNetwork | None = None, log=print) -> dict:
    """Run the full pipeline and write every artefact under ``cfg.output_dir``.

    Returns the report dictionary (also written as ``report.json``).
    A failing stage raises :class:`StageError`; files already written stay.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved()
    (out / "config.json").write_text(resolved.to_json())
    timings: dict = {}
    log = log or (lambda *a: None)

    with _Stage("data", timings):
        op = cfg.operator()
        ds = prepare_data(cfg, op)
        noisy_train = pseudo_inverse_samples(op, ds.measured, cfg.delta)
        log(f"data: {len(ds.real)} real / {len(ds.measured)} measured (unpaired), {len(ds.test_y)} test")

    with _Stage("train", timings):
        tc = resolved.train_config()
        if net is None:
            t0 = time.perf_counter()

            def progress(step, _net, tlog):
                if (step + 1) % max(1, tc.steps // 10) == 0:
                    log(f"train: step {step + 1}/{tc.steps} gap {tlog.gap[-1]:.4f} "
                        f"grad-norm {tlog.mean_grad_norm[-1]:.3f} ({time.perf_counter() - t0:.0f}s)")

            net, tlog = train(tc, ds.real, ds.measured, op, noisy=noisy_train, callback=progress)
            tlog.write_csv(out / "train_log.csv")
        else:
            tlog = TrainLog()
        save_weights(net, out / "critic.advr")

    with _Stage("lambda", timings):
        if cfg.lam is None:
            lam = cfg.lam_scale * estimate_lambda(op, cfg.noise(), cfg.lam_samples, seed=cfg.seed + 3)
        else:
            lam = float(cfg.lam)
        sc = resolved.solve_config(lam)
        log(f"lambda: {lam:.4f}")

    methods = {}
    traces_dir = out / "traces"
    traces_dir.mkdir(exist_ok=True)

    with _Stage("baselines", timings):
        first = "FBP" if cfg.task == "ct" else "Noisy"
        methods[first] = np.stack([fbp(op, y, cfg.delta) for y in ds.test_y])
        tv_base = TVConfig(iterations=cfg.tv_iterations)
        grid = cfg.alpha_grid()
        if len(grid) == 1 or len(ds.val_y) == 0:
            alpha = float(sorted(grid)[0])
        else:
            alpha = line_search_alpha(op, ds.val_y, ds.val_truth, grid, tv_base)
        tv_cfg = TVConfig(alpha=alpha, iterations=cfg.tv_iterations)
        tv_imgs = []
        for i, y in enumerate(ds.test_y):
            x, energies = tv_reconstruct(op, y, tv_cfg)
            tv_imgs.append(x)
            _write_rows(traces_dir / f"tv_{i:03d}.csv", ["iteration", "energy"], [(k, repr(float(e))) for k, e in enumerate(energies)])
        methods["TV"] = np.stack(tv_imgs)
        log(f"baselines: TV alpha {alpha:g}")

    with _Stage("reconstruct", timings):
        recs = []
        for i, y in enumerate(ds.test_y):
            x, trace = reconstruct(net, op, y, sc, cfg.delta)
            recs.append(x)
            _write_rows(
                traces_dir / f"adversarial_{i:03d}.csv",
                ["iteration", "objective", "data_term", "regularizer", "grad_norm", "step"],
                [(r[0],) + tuple(repr(float(v)) for v in r[1:]) for r in trace.rows()],
            )
        methods["Adversarial"] = np.stack(recs)

    with _Stage("report", timings):
        groups = {"FBP": "model-based", "Noisy": "input", "TV": "model-based", "Adversarial": "unsupervised"}
        per_image, summary = [], []
        for name, imgs in methods.items():
            p = [psnr(x, t) for x, t in zip(imgs, ds.test_truth)]
            s = [ssim(x, t) for x, t in zip(imgs, ds.test_truth)]
            per_image += [(name, i, repr(p[i]), repr(s[i])) for i in range(len(p))]
            summary.append({"method": name, "group": groups[name], "psnr": float(np.mean(p)), "ssim": float(np.mean(s))})
            for i, x in enumerate(imgs):
                save_image(out / "images" / name.lower() / f"{i:03d}", x)
        for i, t in enumerate(ds.test_truth):
            save_image(out / "images" / "truth" / f"{i:03d}", t)
        _write_rows(out / "metrics.csv", ["method", "index", "psnr", "ssim"], per_image)
        _write_rows(out / "summary.csv", ["method", "group", "psnr", "ssim"],
                    [(r["method"], r["group"], repr(r["psnr"]), repr(r["ssim"])) for r in summary])
        report = {
            "task": cfg.task,
            "rows": summary,
            "omitted": "supervised methods are outside the unsupervised setting and are not run",
            "lambda": lam,
            "tv_alpha": alpha,
            "unpaired": True,
            "pools": {k: [v[0], v[-1] + 1] if v else [] for k, v in ds.index.items()},
            "train_steps": len(tlog),
            "final_gap": float(np.mean(tlog.gap[-50:])) if len(tlog) else None,
            "final_grad_norm": float(np.mean(tlog.mean_grad_norm[-50:])) if len(tlog) else None,
        }
        if cfg.figures:
            from .figures import reconstruction_grid, training_curves

            fig_dir = out / "figures"
            fig_dir.mkdir(exist_ok=True)
            if len(tlog):
                training_curves(tlog, fig_dir / "training.png")
            reconstruction_grid(ds.test_truth, methods, fig_dir / "reconstructions.png")
        report["timings"] = dict(timings)
        (out / "report.json").write_text(json.dumps(report, indent=2))
        for r in summary:
            log(f"{r['method']:<12} {r['group']:<13} PSNR {r['psnr']:7.3f}  SSIM {r['ssim']:.4f}")
    return report


def load_critic(path) -> CriticNetwork:
    return load_weights(path)


def input_psnr(ds: Dataset) -> float:
    return float(np.mean([psnr(y, t) for y, t in zip(ds.test_y, ds.test_truth)]))


def step_bound(op: OperatorSpec) -> float:
    """Largest stable fixed step for the data term, ``1 / ||A||^2``."""
    return 1.0 / operator_norm_sq(op, 50)
