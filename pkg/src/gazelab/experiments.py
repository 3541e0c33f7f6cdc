"""Experiment commands behind the CLI.

Each ``cmd_*`` takes a resolved :class:`ExperimentConfig` and an empty run
directory, writes its artifacts there and returns a small summary dict.
Attack-style commands are split into cells (one epsilon/alpha pair, one
region set, ...). A cell attacks every (sample, target) pair of the fold and
leaves one JSON record per pair; the CSV cell is aggregated from those
records, and a cell record next to the CSV lists them.
"""
from __future__ import annotations

import hashlib
import json
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data as gdata
from . import models as gmodels
from .attack import AttackConfig, attack, batch_attack, derive_iterations, mean_std
from .autodiff import Tensor, tsum
from .config import ExperimentConfig, parse_region_set
from .defense import DefenseConfig, free_adv_train
from .errors import ConfigError
from .geometry import TARGETS, GazeLabel, vec_to_pitchyaw
from .losses import angular_error_batch, tv_loss
from .patch import (PatchTrainConfig, circle_patch, evaluate_patch, masked_tv, sample_attack_set,
                    save_patch, train_patch)
from .report import sha256_file, to_gray, write_csv, write_json, write_ppm

HEATMAP_SCALE = 16


# -- shared context ----------------------------------------------------------------
def _targets(cfg: ExperimentConfig) -> dict:
    out = {}
    for name in cfg.run.targets:
        if name not in TARGETS:
            raise ConfigError(f"unknown target '{name}' (known: {', '.join(TARGETS)})")
        out[name] = TARGETS[name]
    return out


def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"this command needs run.{what} (a file path)")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def limit_fold(fold, max_images: int):
    """Evenly strided subset of at most ``max_images`` samples (0 keeps all)."""
    n = len(fold)
    if max_images <= 0 or max_images >= n:
        return fold
    idx = np.unique(np.round(np.linspace(0, n - 1, max_images)).astype(int))
    return fold.subset(idx.tolist())


def load_fold(cfg: ExperimentConfig):
    ds = gdata.load_dataset(_require(cfg.run.dataset, "dataset"))
    train, fold = gdata.split_leave_one_person_out(ds, cfg.run.fold)
    return train, limit_fold(fold, cfg.run.max_images)


def input_digests(cfg: ExperimentConfig) -> dict:
    out = {}
    for key in ("dataset", "model", "hardened"):
        path = getattr(cfg.run, key)
        if path and Path(path).exists():
            out[key] = {"path": str(path), "sha256": sha256_file(path)}
    return out


class CellContext:
    """Serialized model(s) and fold shared by every cell of one command."""

    def __init__(self, cfg: ExperimentConfig, fold, models: dict):
        self.fold_bytes = gdata.dumps_dataset(fold)
        self.model_bytes = {k: gmodels.dumps_model(m) for k, m in models.items()}
        self.workers = max(1, cfg.run.workers)
        self.base = {
            "inputs": {k: v["sha256"] for k, v in input_digests(cfg).items()},
            "fold": cfg.run.fold, "max_images": cfg.run.max_images,
            "targets": list(cfg.run.targets),
        }

    def cell_hash(self, cell: dict) -> str:
        blob = json.dumps({"base": self.base, "cell": cell}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _attack_cell(args) -> list:
    model_bytes, fold_bytes, cell = args
    model = gmodels.loads_model(model_bytes)
    fold = gdata.loads_dataset(fold_bytes)
    targets = {name: TARGETS[name] for name in cell["targets"]}
    regions = None if cell["regions"] is None else tuple(cell["regions"])
    rep = batch_attack(model, fold, targets, cell["epsilon"], cell["alpha"], regions=regions,
                       lambda_tv=cell["lambda_tv"])
    faces = fold.arrays()["face"]
    records = []
    for i, name, r in rep.results:
        d = r.x_adv["face"] - faces[i]
        rec = {
            "sample": i, "person_id": fold.samples[i].person_id, "target": name,
            "n_iters": derive_iterations(cell["epsilon"], cell["alpha"]),
            "best_iter": r.best_iter,
            "initial_target_error_deg": r.initial_target_error_deg,
            "final_target_error_deg": r.final_target_error_deg,
            "initial_gt_error_deg": r.initial_gt_error_deg,
            "final_gt_error_deg": r.final_gt_error_deg,
            "perturbation_linf": float(np.abs(d).max()),
            "perturbation_tv": float(tv_loss(Tensor(d)).data),
            "adv_image_tv": float(tv_loss(Tensor(r.x_adv["face"])).data),
        }
        if i in cell.get("keep", ()):
            rec["x_adv_face"] = r.x_adv["face"].tolist()
        records.append(rec)
    return records


def run_cells(ctx: CellContext, cells: list, run_dir: Path) -> list:
    """Run (or reload) every cell; returns the per-pair records of each cell, in order."""
    rec_dir = run_dir / "records"
    rec_dir.mkdir(exist_ok=True)
    out = [None] * len(cells)
    todo = []
    for k, cell in enumerate(cells):
        h = ctx.cell_hash(cell)
        names = [f"{h}_s{i:04d}_{t}.json" for t in cell["targets"] for i in range(cell["n_samples"])]
        if not cell.get("keep") and all((rec_dir / n).exists() for n in names):
            out[k] = [json.loads((rec_dir / n).read_text()) for n in names]
        else:
            todo.append(k)
    args = [(ctx.model_bytes[cells[k]["model"]], ctx.fold_bytes, cells[k]) for k in todo]
    if ctx.workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=ctx.workers) as pool:
            results = list(pool.map(_attack_cell, args))
    else:
        results = [_attack_cell(a) for a in args]
    for k, recs in zip(todo, results):
        out[k] = recs
        h = ctx.cell_hash(cells[k])
        for rec in recs:
            slim = {key: v for key, v in rec.items() if key != "x_adv_face"}
            slim["cell"] = cells[k]
            slim["cell_hash"] = h
            write_json(rec_dir / f"{h}_s{rec['sample']:04d}_{rec['target']}.json", slim)
    for k, cell in enumerate(cells):
        for rec in out[k]:
            rec.setdefault("cell_hash", ctx.cell_hash(cell))
    return out


def aggregate(records: list) -> dict:
    t = [r["final_target_error_deg"] for r in records]
    g = [r["final_gt_error_deg"] for r in records]
    agg = {"n": len(records), "target_median": float(np.median(t)) if t else float("nan")}
    agg["target_mean"], agg["target_std"] = mean_std(t)
    agg["gt_mean"], agg["gt_std"] = mean_std(g)
    agg["initial_target_mean"] = mean_std(r["initial_target_error_deg"] for r in records)[0]
    agg["perturbation_tv_mean"] = mean_std(r["perturbation_tv"] for r in records)[0]
    agg["adv_image_tv_mean"] = mean_std(r["adv_image_tv"] for r in records)[0]
    return agg


def write_cell_record(run_dir: Path, table: str, key: str, cell: dict, records: list, agg: dict):
    d = run_dir / "cells" / table
    d.mkdir(parents=True, exist_ok=True)
    files = [f"{r['cell_hash']}_s{r['sample']:04d}_{r['target']}.json" for r in records]
    write_json(d / f"{key}.json", {"table": table, "key": key, "cell": cell,
                                   "aggregate": agg, "records": files})


def _cell(fold, targets, epsilon, alpha, regions=None, lambda_tv=0.0, model="plain", keep=()):
    return {"epsilon": float(epsilon), "alpha": float(alpha), "targets": list(targets),
            "regions": None if regions is None else list(regions), "lambda_tv": float(lambda_tv),
            "model": model, "n_samples": len(fold), "keep": list(keep)}


def _load_model(path: str, what: str = "model"):
    return gmodels.load_model(_require(path, what))


# -- commands --------------------------------------------------------------------------
def cmd_gen_data(cfg: ExperimentConfig, run_dir: Path) -> dict:
    ds = gdata.generate(cfg.data.seed, cfg.data.persons, cfg.data.per_person)
    digest = gdata.save_dataset(ds, run_dir / "dataset.gzds")
    return {"dataset": str(run_dir / "dataset.gzds"), "sha256": digest, "n_samples": len(ds)}


def _train_config(cfg: ExperimentConfig) -> gmodels.TrainConfig:
    t = cfg.train
    return gmodels.TrainConfig(epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
                               momentum=t.momentum, loss_kind=t.loss_kind, seed=t.seed)


def cmd_train(cfg: ExperimentConfig, run_dir: Path) -> dict:
    tcfg = _train_config(cfg)
    train_set, fold = load_fold(cfg)
    model = gmodels.build_model(cfg.train.kind, cfg.train.init_seed)
    res = gmodels.train(model, train_set, tcfg)
    gmodels.save_model(res.model, run_dir / "model.gzml")
    held_out = gmodels.mean_angular_error(res.model, fold)
    write_csv(run_dir / "train.csv", ["epoch", "loss"],
              [(k + 1, v) for k, v in enumerate(res.loss_curve)])
    write_csv(run_dir / "train_error.csv", ["split", "mean_angular_error_deg"],
              [("train", res.final_error_deg), ("held_out", held_out)])
    return {"model": str(run_dir / "model.gzml"), "train_error_deg": res.final_error_deg,
            "held_out_error_deg": held_out}


def cmd_defend(cfg: ExperimentConfig, run_dir: Path) -> dict:
    t, d = cfg.train, cfg.defense
    dcfg = DefenseConfig(replay_m=d.replay_m, epsilon=d.epsilon, alpha=d.alpha, lambda_adv=d.lambda_adv,
                         base_epochs=t.epochs, loss_kind=t.loss_kind, seed=t.seed,
                         batch_size=t.batch_size, learning_rate=t.learning_rate, momentum=t.momentum)
    train_set, fold = load_fold(cfg)
    model = gmodels.build_model(t.kind, t.init_seed)
    res = free_adv_train(model, train_set, dcfg)
    gmodels.save_model(res.model, run_dir / "hardened.gzml")
    held_out = gmodels.mean_angular_error(res.model, fold)
    write_csv(run_dir / "defend.csv", ["outer_epoch", "loss", "delta_abs_max"],
              [(k + 1, v, dm) for k, (v, dm) in enumerate(zip(res.loss_curve, res.delta_history))])
    write_csv(run_dir / "defend_error.csv", ["split", "mean_angular_error_deg"],
              [("train", res.final_error_deg), ("held_out", held_out)])
    return {"model": str(run_dir / "hardened.gzml"), "held_out_error_deg": held_out,
            "parameter_updates": res.parameter_updates}


def _per_target_rows(records: list, targets) -> list:
    rows = []
    for name in list(targets) + ["all"]:
        sel = [r for r in records if name == "all" or r["target"] == name]
        a = aggregate(sel)
        rows.append((name, a["initial_target_mean"], a["target_mean"], a["target_std"],
                     a["target_median"], a["gt_mean"], a["gt_std"]))
    return rows


PER_TARGET_HEADER = ["target", "initial_target_mean", "target_mean", "target_std", "target_median",
                     "gt_mean", "gt_std"]


def cmd_attack(cfg: ExperimentConfig, run_dir: Path) -> dict:
    _, fold = load_fold(cfg)
    targets = _targets(cfg)
    ctx = CellContext(cfg, fold, {"plain": _load_model(cfg.run.model)})
    cell = _cell(fold, targets, cfg.attack.epsilon, cfg.attack.alpha, lambda_tv=cfg.attack.lambda_tv)
    (records,) = run_cells(ctx, [cell], run_dir)
    write_cell_record(run_dir, "attack", "all", cell, records, aggregate(records))
    write_csv(run_dir / "attack.csv", PER_TARGET_HEADER, _per_target_rows(records, targets))
    return aggregate(records)


def cmd_sweep(cfg: ExperimentConfig, run_dir: Path) -> dict:
    _, fold = load_fold(cfg)
    targets = _targets(cfg)
    ctx = CellContext(cfg, fold, {"plain": _load_model(cfg.run.model)})
    eps_list, alpha_list = cfg.attack.eps_list, cfg.attack.alpha_list
    cells = [_cell(fold, targets, e, a) for a in alpha_list for e in eps_list]
    results = run_cells(ctx, cells, run_dir)
    aggs = [aggregate(r) for r in results]
    for cell, recs, agg in zip(cells, results, aggs):
        write_cell_record(run_dir, "sweep", f"alpha={cell['alpha']:g}_eps={cell['epsilon']:g}",
                          cell, recs, agg)
    header = ["alpha"] + [f"eps={e:g}" for e in eps_list]
    grids = {}
    for stat, fname in (("target_mean", "sweep.csv"), ("target_std", "sweep_std.csv"),
                        ("target_median", "sweep_median.csv"), ("gt_mean", "sweep_gt.csv"),
                        ("gt_std", "sweep_gt_std.csv")):
        grid = np.array([a[stat] for a in aggs]).reshape(len(alpha_list), len(eps_list))
        grids[stat] = grid
        write_csv(run_dir / fname, header,
                  [[f"{a:g}"] + list(row) for a, row in zip(alpha_list, grid)])
    write_ppm(run_dir / "sweep_heatmap.ppm", to_gray(grids["target_mean"]), HEATMAP_SCALE)
    return {"grid": grids["target_mean"].tolist()}


def cmd_regions(cfg: ExperimentConfig, run_dir: Path) -> dict:
    sets = [(text, parse_region_set(text)) for text in cfg.regions.sets]
    _, fold = load_fold(cfg)
    targets = _targets(cfg)
    ctx = CellContext(cfg, fold, {"plain": _load_model(cfg.run.model)})
    if [n for n, _ in gmodels.load_model(cfg.run.model).input_spec][0] != "face":
        raise ConfigError("region study needs a model with a face input")
    cells = [_cell(fold, targets, cfg.regions.epsilon, cfg.regions.alpha, regions=r) for _, r in sets]
    results = run_cells(ctx, cells, run_dir)
    rows = []
    for (text, _), cell, recs in zip(sets, cells, results):
        agg = aggregate(recs)
        write_cell_record(run_dir, "regions", text, cell, recs, agg)
        rows.append((text, agg["target_mean"], agg["target_std"], agg["gt_mean"], agg["gt_std"]))
    write_csv(run_dir / "regions.csv", ["regions", "target_mean", "target_std", "gt_mean", "gt_std"], rows)
    return {r[0]: r[1] for r in rows}


def _direction(model, face: np.ndarray, others: dict) -> list:
    inputs = {"face": face[None], **{k: v[None] for k, v in others.items()}}
    return list(vec_to_pitchyaw(model.predict(inputs)[0]))


def cmd_smooth(cfg: ExperimentConfig, run_dir: Path) -> dict:
    _, fold = load_fold(cfg)
    targets = _targets(cfg)
    model = _load_model(cfg.run.model)
    ctx = CellContext(cfg, fold, {"plain": model})
    s = cfg.smooth
    keep = list(range(min(s.n_examples, len(fold))))
    cells = [_cell(fold, targets, s.epsilon, s.alpha, lambda_tv=lam, keep=keep) for lam in s.lambdas]
    results = run_cells(ctx, cells, run_dir)
    img_dir = run_dir / "images"
    img_dir.mkdir(exist_ok=True)
    arrays = fold.arrays()
    first = next(iter(targets))
    rows, directions = [], []
    for lam, cell, recs in zip(s.lambdas, cells, results):
        agg = aggregate(recs)
        write_cell_record(run_dir, "smooth", f"lambda={lam:g}", cell, recs, agg)
        rows.append((f"{lam:g}", agg["target_mean"], agg["target_std"], agg["perturbation_tv_mean"],
                     agg["adv_image_tv_mean"]))
        for rec in recs:
            if rec["target"] != first or "x_adv_face" not in rec:
                continue
            i = rec["sample"]
            x0 = arrays["face"][i]
            xa = np.array(rec["x_adv_face"])
            others = {k: arrays[k][i] for k, _ in model.input_spec if k != "face"}
            stem = f"lambda={lam:g}_s{i:04d}_{first}"
            write_ppm(img_dir / f"{stem}_before.ppm", x0)
            write_ppm(img_dir / f"{stem}_after.ppm", xa)
            directions.append({"image": stem, "lambda_tv": lam, "sample": i,
                               "before_pitchyaw": _direction(model, x0, others),
                               "after_pitchyaw": _direction(model, xa, others),
                               "target_pitchyaw": [TARGETS[first].pitch, TARGETS[first].yaw]})
    write_json(img_dir / "directions.json", directions)
    write_csv(run_dir / "smooth.csv", ["lambda_tv", "target_mean", "target_std", "perturbation_tv_mean",
                                           "adv_image_tv_mean"], rows)
    return {r[0]: {"target_mean": r[1], "perturbation_tv": r[3], "image_tv": r[4]} for r in rows}


def cmd_patch(cfg: ExperimentConfig, run_dir: Path) -> dict:
    _, fold = load_fold(cfg)
    targets = _targets(cfg)
    model = _load_model(cfg.run.model)
    p = cfg.patch
    spec = circle_patch((p.center_row, p.center_col), p.radius,
                        avoid_samples=fold.samples if p.landmark_clearance else None)
    attack_set = sample_attack_set(fold, p.sample_fraction, cfg.run.seed)
    patch_dir = run_dir / "patches"
    patch_dir.mkdir(exist_ok=True)
    base = evaluate_patch(model, fold, spec, targets)
    write_csv(run_dir / "patch_baseline.csv", ["target", "target_mean", "target_std", "gt_mean", "gt_std"],
              [(n, *base[n]["target"], *base[n]["gt"]) for n in list(targets) + ["all"]])
    columns = {}
    for lam in p.lambdas:
        patches, tvs = {}, {}
        for k, (name, target) in enumerate(targets.items()):
            # one RNG stream per target, shared by every lambda column
            seed = int(np.random.SeedSequence([cfg.run.seed, k]).generate_state(1)[0])
            tcfg = PatchTrainConfig(alpha=p.alpha, num_epochs=p.num_epochs, sample_fraction=p.sample_fraction,
                                    lambda_tv=lam, target=target, seed=seed, steps_per_image=p.steps_per_image)
            res = train_patch(model, attack_set, spec, tcfg)
            patches[name] = res.patch
            tvs[name] = masked_tv(res.patch)
            save_patch(res.patch, patch_dir / f"lambda={lam:g}_{name}", tcfg)
            write_ppm(patch_dir / f"lambda={lam:g}_{name}.ppm", res.patch.content * res.patch.mask)
        ev = evaluate_patch(model, fold, patches, targets)
        for name in targets:
            write_json(patch_dir / f"lambda={lam:g}_{name}.eval.json",
                       {"target": name, "lambda_tv": lam, "target_errors": ev[name]["target_errors"],
                        "gt_errors": ev[name]["gt_errors"], "patch_tv": tvs[name],
                        "attack_set": [s.person_id for s in attack_set.samples],
                        "n_eval": len(fold)})
        tvs["all"] = mean_std(tvs.values())[0]
        columns[lam] = (ev, tvs)
        d = run_dir / "cells" / "patch"
        d.mkdir(parents=True, exist_ok=True)
        write_json(d / f"lambda={lam:g}.json",
                   {"lambda_tv": lam, "rows": {n: {"target": ev[n]["target"], "gt": ev[n]["gt"]}
                                               for n in list(targets) + ["all"]},
                    "records": [f"patches/lambda={lam:g}_{n}.eval.json" for n in targets]})
    header = ["target"] + [f"lambda={lam:g}" for lam in p.lambdas]
    names = list(targets) + ["all"]
    for fname, pick in (("patch.csv", lambda ev, tv, n: ev[n]["target"][0]),
                        ("patch_std.csv", lambda ev, tv, n: ev[n]["target"][1]),
                        ("patch_gt.csv", lambda ev, tv, n: ev[n]["gt"][0]),
                        ("patch_tv.csv", lambda ev, tv, n: tv[n])):
        write_csv(run_dir / fname, header,
                  [[n] + [pick(*columns[lam], n) for lam in p.lambdas] for n in names])
    return {"baseline": base["all"]["target"][0],
            **{f"lambda={lam:g}": columns[lam][0]["all"]["target"][0] for lam in p.lambdas}}


def cmd_defense_eval(cfg: ExperimentConfig, run_dir: Path) -> dict:
    _, fold = load_fold(cfg)
    targets = _targets(cfg)
    models = {"plain": _load_model(cfg.run.model), "defended": _load_model(cfg.run.hardened, "hardened")}
    ctx = CellContext(cfg, fold, models)
    d = cfg.defense
    cells = [_cell(fold, targets, e, d.eval_alpha, model=m) for e in d.eval_eps for m in models]
    results = run_cells(ctx, cells, run_dir)
    by_key = {}
    for cell, recs in zip(cells, results):
        key = f"eps={cell['epsilon']:g}_{cell['model']}"
        by_key[(cell["epsilon"], cell["model"])] = recs
        write_cell_record(run_dir, "defense", key, cell, recs, aggregate(recs))
    header, rows = ["epsilon"], []
    for metric in ("target", "gt"):
        for m in models:
            header += [f"{m}_{metric}_mean", f"{m}_{metric}_std"]
    for e in d.eval_eps:
        row = [f"{e:g}"]
        for metric in ("target", "gt"):
            for m in models:
                a = aggregate(by_key[(float(e), m)])
                row += [a[f"{metric}_mean"], a[f"{metric}_std"]]
        rows.append(row)
    write_csv(run_dir / "defense.csv", header, rows)
    pt_rows = []
    for e in d.eval_eps:
        for name in targets:
            row = [f"{e:g}", name]
            for m in models:
                a = aggregate([r for r in by_key[(float(e), m)] if r["target"] == name])
                row += [a["target_mean"], a["target_std"], a["gt_mean"], a["gt_std"]]
            pt_rows.append(row)
    pt_header = ["epsilon", "target"] + [f"{m}_{s}" for m in models
                                         for s in ("target_mean", "target_std", "gt_mean", "gt_std")]
    write_csv(run_dir / "defense_per_target.csv", pt_header, pt_rows)
    write_csv(run_dir / "defense_clean.csv", ["model", "clean_gt_error_deg"],
              [(m, gmodels.mean_angular_error(models[m], fold)) for m in models])
    return {f"eps={r[0]}": {"plain_gt": r[5], "defended_gt": r[7]} for r in rows}


def saliency_map(model, inputs: dict, target: GazeLabel) -> dict:
    """|dL/dx| of the angular error to ``target`` for every input, normalized to [0, 255]."""
    frozen = model.frozen()
    leaves = {k: Tensor(np.asarray(v, dtype=np.float64)[None], requires_grad=True) for k, v in inputs.items()}
    pred = frozen.forward(leaves)[-1]
    loss = angular_error_batch(pred, Tensor(target.vec[None]))
    tsum(loss).backward()
    return {k: to_gray(np.abs(leaf.grad[0])) for k, leaf in leaves.items()}


def cmd_saliency(cfg: ExperimentConfig, run_dir: Path) -> dict:
    _, fold = load_fold(cfg)
    model = _load_model(cfg.run.model)
    s = cfg.saliency
    if s.target not in TARGETS:
        raise ConfigError(f"unknown target '{s.target}'")
    if not 0 <= s.sample < len(fold):
        raise ConfigError(f"saliency.sample {s.sample} outside fold of {len(fold)}")
    target = TARGETS[s.target]
    arrays = fold.arrays()
    inputs = {k: arrays[k][s.sample] for k, _ in model.input_spec}
    res = attack(model, inputs, fold.samples[s.sample].label, AttackConfig(s.epsilon, s.alpha, target))
    rows = []
    for tag, x in (("original", inputs), ("attacked", res.x_adv)):
        maps = saliency_map(model, x, target)
        for k in maps:
            write_ppm(run_dir / f"{tag}_{k}.ppm", x[k])
            write_ppm(run_dir / f"saliency_{tag}_{k}.ppm", maps[k])
            rows.append((tag, k, float(maps[k].mean()), int(maps[k].max())))
    write_csv(run_dir / "saliency.csv", ["image", "input", "mean_level", "max_level"], rows)
    return {"final_target_error_deg": res.final_target_error_deg}


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack, "sweep": cmd_sweep,
    "regions": cmd_regions, "smooth": cmd_smooth, "patch": cmd_patch, "defend": cmd_defend,
    "defense-eval": cmd_defense_eval, "saliency": cmd_saliency,
}


def run_command(cfg: ExperimentConfig, run_dir: Path) -> dict:
    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command '{cfg.command}'")
    run_dir = Path(run_dir)
    created = not run_dir.exists()
    run_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        write_json(run_dir / "config.json", {"command": cfg.command, "config": cfg.to_dict(),
                                             "inputs": input_digests(cfg)})
        summary = COMMANDS[cfg.command](cfg, run_dir)
    except BaseException:
        if created:
            shutil.rmtree(run_dir, ignore_errors=True)
        raise
    write_json(run_dir / "run.json", {"command": cfg.command, "summary": summary,
                                      "runtime_s": round(time.perf_counter() - t0, 3)})
    return summary
