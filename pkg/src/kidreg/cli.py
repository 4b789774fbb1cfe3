"""Command-line orchestration: pipeline commands plus the ablation and
uncertainty experiment harnesses.

All numeric knobs live in one JSON config (deep-merged over defaults);
flags only select the command, config path, seed, and output directory.
Every artifact directory receives a ``run.json`` carrying the seed and
the SHA-256 of the merged config, and CSVs are prefixed with the same
stamp, so identical config + seed reruns are byte-identical.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys

DEFAULT_CONFIG = {
    "grid": "desk",
    "n_w": 5,
    "frame": 0,
    "n_transforms": 200,
    "phantom": {},           # PhantomConfig overrides
    "featnet": {},           # FeatNetConfig overrides
    "regnet": {},            # RegNetConfig overrides
    "optimizer": {},         # OptConfig overrides
    "loss": {},              # LossWeights overrides
    "feat_epochs": 10,
    "feat_stride": 6,        # take every k-th frame as a training window
    "reg_epochs": 30,
    "transfer_epochs": 2,
    "ablate_sizes": [1, 3, 5],
    "ablate_epochs": 2,
    "ablate_repeats": 3,
    "ablate_holdout": 0.1,   # fraction of training pairs withheld (0.01-0.1)
    "paths": {
        "phantom": None,     # phantom case directory
        "refs": None,        # reference transform JSON (fit-gauss input)
        "gauss": None,       # Gaussian model JSON (sample input)
        "transforms": None,  # sampled transform JSON (gen-pairs/train-reg)
        "pairs": None,       # pair manifest JSON (train-reg input)
        "regnet": None,      # registration checkpoint (transfer/register)
        "featnet": None,     # feature checkpoint
        "window": None,      # transform window JSON (optimize warm start)
        "result": None,      # registered transform JSON (eval input)
        "reference": None,   # reference transform JSON (eval; default: gt)
    },
}


def _merge(base: dict, override: dict, path="") -> dict:
    from .errors import ConfigurationError
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigurationError(f"unknown config key '{path}{k}'")
        if isinstance(base[k], dict) and k != "phantom" and k != "featnet" \
                and k != "regnet" and k != "optimizer" and k != "loss":
            if not isinstance(v, dict):
                raise ConfigurationError(f"'{path}{k}' must be an object")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path) as fh:
        doc = json.load(fh)
    return _merge(DEFAULT_CONFIG, doc)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class _Run:
    """Shared context handed to every command."""

    def __init__(self, cfg: dict, seed: int, out: str):
        self.cfg = cfg
        self.seed = seed
        self.out = out
        self.hash = config_hash(cfg)
        os.makedirs(out, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def stamp(self, command: str) -> None:
        doc = {"command": command, "seed": self.seed,
               "config_hash": self.hash}
        with open(self.path("run.json"), "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)

    def csv_header(self) -> str:
        return f"# seed={self.seed} config={self.hash}\n"

    def write_json(self, name: str, doc: dict) -> None:
        doc = dict(doc, seed=self.seed, config_hash=self.hash)
        with open(self.path(name), "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)

    def stamp_csv(self, path: str) -> None:
        with open(path) as fh:
            body = fh.read()
        with open(path, "w") as fh:
            fh.write(self.csv_header() + body)

    def input_path(self, key: str, fallback: str | None = None) -> str:
        from .errors import ConfigurationError
        p = self.cfg["paths"].get(key) or fallback
        if p is None:
            raise ConfigurationError(f"config paths.{key} is required")
        if not os.path.exists(p):
            raise FileNotFoundError(f"paths.{key}: '{p}' does not exist")
        return p


# ---------------------------------------------------------------------------
# artifact helpers


def _load_case(run: _Run):
    from .datagen import load_phantom
    return load_phantom(run.input_path("phantom"))


def _reference_pair(run: _Run, case):
    from .datagen import make_reference_pair
    return make_reference_pair(case, run.cfg["frame"], run.cfg["n_w"])


def _training_pairs(run: _Run, case=None):
    from .datagen import generate_pairs, load_reference_params
    case = case if case is not None else _load_case(run)
    ref = _reference_pair(run, case)
    ts = load_reference_params(run.input_path("transforms"))
    return ref, generate_pairs(ref, ts)


def _regnet_config(run: _Run, n_w: int | None = None, seed=None):
    from .regnet import RegNetConfig
    kw = dict(run.cfg["regnet"])
    kw["n_w"] = n_w if n_w is not None else run.cfg["n_w"]
    kw["seed"] = seed if seed is not None else run.seed
    return RegNetConfig(**kw)


def _load_regnet(run: _Run, key="regnet"):
    from . import diffgraph as dg
    from .regnet import build_regnet
    net = build_regnet(_regnet_config(run))
    dg.load_checkpoint(run.input_path(key), net)
    return net


def _feat_cases(run: _Run, case):
    """(window volume, mask slab) training samples from a phantom."""
    import numpy as np
    from .volume import MaskVolume, Volume
    n_w = run.cfg["n_w"]
    sp = (case.ct.spacing[0], case.spacing2d[0], case.spacing2d[1])
    out = []
    for t in range(0, case.n_frames, max(1, run.cfg["feat_stride"])):
        win = case.frame_window(t, n_w)
        msk = case.frame_window(t, n_w, masks=True)
        out.append((Volume(np.stack(win.frames), sp),
                    MaskVolume(np.stack(msk.frames).astype(np.float32), sp)))
    return out


def _sequence_smoothness(params_list, center) -> float:
    """Mean Frobenius norm of second differences of the per-frame
    transform matrices along the registered sequence."""
    import numpy as np
    from .geometry import params_to_matrix
    mats = [params_to_matrix(p, center).matrix for p in params_list]
    if len(mats) < 3:
        return 0.0
    return float(np.mean([np.linalg.norm(mats[i + 1] + mats[i - 1]
                                         - 2 * mats[i])
                          for i in range(1, len(mats) - 1)]))


def _register_and_eval(run: _Run, net, case, ref, report_path: str):
    import numpy as np
    from .metrics import eval_sequence
    from .regnet import register_sequence, sequence_pairs
    seq = sequence_pairs(ref, case, n_w=net.cfg.n_w)
    params = register_sequence(net, ref.mov_mask, seq)
    absolute = _absolute_params(run, case, params)
    report = eval_sequence(absolute, case.gt, case)
    report.to_csv(report_path)
    run.stamp_csv(report_path)
    agg = report.aggregates()
    smooth = _sequence_smoothness(absolute, case.ct.center_mm)
    return params, agg, smooth


def _absolute_params(run: _Run, case, params):
    """Registration output is relative to the gt-posed reference CT;
    compose with the reference frame pose to compare against gt."""
    from .geometry import compose, matrix_to_params, params_to_matrix
    center = case.ct.center_mm
    ref_mat = params_to_matrix(case.gt[run.cfg["frame"]], center)
    return [matrix_to_params(compose(params_to_matrix(p, center), ref_mat),
                             center) for p in params]


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(run: _Run):
    from .datagen import (PhantomConfig, make_phantom, save_phantom,
                          save_reference_params)
    case = make_phantom(PhantomConfig(**run.cfg["phantom"]), run.seed)
    save_phantom(run.path("phantom"), case)
    save_reference_params(run.path("gt_params.json"), case.gt)


def cmd_fit_gauss(run: _Run):
    from .datagen import fit_gaussians, load_reference_params
    refs = load_reference_params(run.input_path("refs"))
    model = fit_gaussians(refs)
    run.write_json("gauss.json", {"mean": list(model.mean),
                                  "std": list(model.std),
                                  "degenerate": model.degenerate})


def cmd_sample(run: _Run):
    import numpy as np
    from .datagen import GaussianModel, sample_transforms, \
        save_reference_params
    with open(run.input_path("gauss")) as fh:
        doc = json.load(fh)
    model = GaussianModel(np.asarray(doc["mean"]), np.asarray(doc["std"]),
                          doc.get("degenerate", False))
    ts = sample_transforms(model, run.cfg["n_transforms"], run.seed)
    save_reference_params(run.path("transforms.json"), ts)


def cmd_gen_pairs(run: _Run):
    """Validate inputs and write the pair manifest; the full pair set is
    regenerated deterministically from it at training time (volumes are
    large, transforms are small)."""
    case = _load_case(run)
    from .datagen import generate_pairs, load_reference_params
    ref = _reference_pair(run, case)
    ts = load_reference_params(run.input_path("transforms"))
    generate_pairs(ref, ts[:1])  # shape/content validation
    run.write_json("pairs.json", {
        "phantom": run.input_path("phantom"),
        "transforms": run.input_path("transforms"),
        "frame": run.cfg["frame"], "n_w": run.cfg["n_w"],
        "count": len(ts)})


def cmd_train_feat(run: _Run):
    from . import diffgraph as dg
    from .featnet import (FeatNetConfig, build_ulbnet, infer_feature,
                          train_segmentation)
    from .metrics import seg_metrics
    case = _load_case(run)
    cases = _feat_cases(run, case)
    if len(cases) < 2:
        from .errors import ConfigurationError
        raise ConfigurationError("need at least 2 feature training windows")
    train, held = cases[:-1], cases[-1]
    kw = dict(run.cfg["featnet"])
    kw.setdefault("input_dims", train[0][0].dims)
    kw["seed"] = run.seed
    net = build_ulbnet(FeatNetConfig(**kw))
    train_segmentation(net, train, run.cfg["feat_epochs"],
                       log_path=run.path("feat_loss.csv"))
    run.stamp_csv(run.path("feat_loss.csv"))
    dg.save_checkpoint(run.path("featnet.json"), net)
    pred = infer_feature(net, held[0])
    dice, sens, spec = seg_metrics(pred.data >= 0.5, held[1].data >= 0.5)
    run.write_json("feat_eval.json", {"dice": dice, "sensitivity": sens,
                                      "specificity": spec})


def cmd_train_reg(run: _Run):
    from . import diffgraph as dg
    from .regnet import build_regnet, pretrain
    _, pairs = _training_pairs(run)
    net = build_regnet(_regnet_config(run))
    history = pretrain(net, pairs, run.cfg["reg_epochs"],
                       log_path=run.path("reg_loss.csv"))
    run.stamp_csv(run.path("reg_loss.csv"))
    dg.save_checkpoint(run.path("regnet.json"), net)
    run.write_json("train_reg.json", {"val_first": history["val"][0],
                                      "val_last": history["val"][-1]})


def cmd_transfer(run: _Run):
    from . import diffgraph as dg
    from .regnet import sequence_loss, sequence_pairs, transfer_one_cycle
    case = _load_case(run)
    net = _load_regnet(run)
    ref = _reference_pair(run, case)
    seq = sequence_pairs(ref, case)
    cycle = seq[:case.cycle_frames]
    before = sequence_loss(net, seq)
    adapted = transfer_one_cycle(net, cycle, run.cfg["transfer_epochs"])
    after = sequence_loss(adapted, seq)
    dg.save_checkpoint(run.path("regnet_transfer.json"), adapted)
    run.write_json("transfer.json", {"loss_pretrained": before,
                                     "loss_transferred": after})


def cmd_register(run: _Run):
    from .datagen import save_reference_params
    from .regnet import register_sequence, sequence_pairs
    case = _load_case(run)
    net = _load_regnet(run)
    ref = _reference_pair(run, case)
    seq = sequence_pairs(ref, case)
    params = register_sequence(net, ref.mov_mask, seq)
    save_reference_params(run.path("registered.json"),
                          _absolute_params(run, case, params))


def cmd_optimize(run: _Run):
    from .geometry import TransformWindow, load_window, save_window
    from .optimizer import OptConfig, optimize_direct
    case = _load_case(run)
    ref = _reference_pair(run, case)
    if run.cfg["paths"].get("window"):
        init, _ = load_window(run.input_path("window"))
    else:
        init = TransformWindow.identity(run.cfg["n_w"])
    kw = dict(run.cfg["optimizer"])
    kw["seed"] = run.seed
    window, bd = optimize_direct(ref.fix_img, ref.mov_img, ref.fix_mask,
                                 ref.mov_mask, init, OptConfig(**kw))
    save_window(run.path("optimized.json"), window, ref.fix_img.center_mm)
    run.write_json("optimize.json", {"feature": bd.feature, "image": bd.image,
                                     "transform": bd.transform,
                                     "total": bd.total})


def cmd_eval(run: _Run):
    from .datagen import load_reference_params
    from .metrics import eval_sequence
    case = _load_case(run)
    result = load_reference_params(run.input_path("result"))
    if run.cfg["paths"].get("reference"):
        reference = load_reference_params(run.input_path("reference"))
    else:
        reference = case.gt
    report = eval_sequence(result, reference, case)
    report.to_csv(run.path("report.csv"))
    run.stamp_csv(run.path("report.csv"))


def cmd_ablate_window(run: _Run):
    import csv
    from .regnet import build_regnet, pretrain
    case = _load_case(run)
    rows = []
    for size in run.cfg["ablate_sizes"]:
        saved_n_w = run.cfg["n_w"]
        run.cfg["n_w"] = int(size)
        try:
            ref, pairs = _training_pairs(run, case)
            net = build_regnet(_regnet_config(run, n_w=int(size)))
            pretrain(net, pairs, run.cfg["ablate_epochs"])
            _, agg, smooth = _register_and_eval(
                run, net, case, ref, run.path(f"report_w{size}.csv"))
        finally:
            run.cfg["n_w"] = saved_n_w
        rows.append({"n_w": size,
                     "mcd_ct_us_mm": agg["mcd_ct_us_mm"]["mean"],
                     "hd_ct_us_mm": agg["hd_ct_us_mm"]["mean"],
                     "smoothness": smooth})
    with open(run.path("ablate_window.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["n_w", "mcd_ct_us_mm",
                                           "hd_ct_us_mm", "smoothness"])
        w.writeheader()
        w.writerows(rows)
    run.stamp_csv(run.path("ablate_window.csv"))


def cmd_ablate_uncertainty(run: _Run):
    import csv
    import numpy as np
    from .errors import ConfigurationError
    from .regnet import build_regnet, pretrain
    frac = float(run.cfg["ablate_holdout"])
    if not 0.01 <= frac <= 0.1:
        raise ConfigurationError("ablate_holdout must be in [0.01, 0.1]")
    case = _load_case(run)
    ref, pairs = _training_pairs(run, case)
    rows = []
    for rep in range(run.cfg["ablate_repeats"]):
        rng = np.random.default_rng(run.seed + rep)
        keep = rng.random(len(pairs)) >= frac
        subset = [p for p, k in zip(pairs, keep) if k] or pairs[:1]
        net = build_regnet(_regnet_config(run, seed=run.seed + rep))
        pretrain(net, subset, run.cfg["ablate_epochs"])
        _, agg, smooth = _register_and_eval(
            run, net, case, ref, run.path(f"report_u{rep}.csv"))
        rows.append({"repeat": rep, "n_train": len(subset),
                     "mcd_ct_us_mm": agg["mcd_ct_us_mm"]["mean"],
                     "hd_ct_us_mm": agg["hd_ct_us_mm"]["mean"],
                     "smoothness": smooth})
    fields = ["repeat", "n_train", "mcd_ct_us_mm", "hd_ct_us_mm",
              "smoothness"]
    with open(run.path("ablate_uncertainty.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
        for stat, fn in (("MEAN", np.mean), ("STD", np.std)):
            w.writerow({"repeat": stat, "n_train": "",
                        **{k: float(fn([r[k] for r in rows]))
                           for k in fields[2:]}})
    run.stamp_csv(run.path("ablate_uncertainty.csv"))


def cmd_report(run: _Run):
    """Collect the MEAN rows of every report CSV under --out."""
    import csv
    rows = []
    for name in sorted(os.listdir(run.out)):
        if not name.endswith(".csv") or name == "summary.csv":
            continue
        with open(run.path(name)) as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = list(csv.reader(lines))
        if not reader:
            continue
        header = reader[0]
        for rec in reader[1:]:
            if rec and rec[0] == "MEAN":
                for col, val in zip(header[1:], rec[1:]):
                    rows.append({"file": name, "metric": col, "mean": val})
    with open(run.path("summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["file", "metric", "mean"])
        w.writeheader()
        w.writerows(rows)
    run.stamp_csv(run.path("summary.csv"))


COMMANDS = {
    "phantom": cmd_phantom,
    "fit-gauss": cmd_fit_gauss,
    "sample": cmd_sample,
    "gen-pairs": cmd_gen_pairs,
    "train-feat": cmd_train_feat,
    "train-reg": cmd_train_reg,
    "transfer": cmd_transfer,
    "register": cmd_register,
    "optimize": cmd_optimize,
    "eval": cmd_eval,
    "ablate-window": cmd_ablate_window,
    "ablate-uncertainty": cmd_ablate_uncertainty,
    "report": cmd_report,
}


def _apply_thread_cap() -> None:
    cap = os.environ.get("KIDREG_THREADS")
    if not cap:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def main(argv=None) -> int:
    _apply_thread_cap()  # before numpy pulls in BLAS
    parser = argparse.ArgumentParser(
        prog="kidreg",
        description="sliced 3D-2D rigid registration pipeline")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="JSON config path")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=".", help="output directory")
    args = parser.parse_args(argv)

    from .errors import (ConfigurationError, DegenerateInputError,
                         EmptyContourError, EmptyMaskError,
                         InvalidParameterError, KidregError, SizeError)
    try:
        cfg = load_config(args.config)
        run = _Run(cfg, args.seed, args.out)
        COMMANDS[args.command](run)
        run.stamp(args.command)
    except (ConfigurationError, InvalidParameterError, TypeError,
            json.JSONDecodeError) as exc:
        print(f"kidreg: config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, SizeError, EmptyMaskError, EmptyContourError,
            KeyError) as exc:
        print(f"kidreg: data error: {exc}", file=sys.stderr)
        return 3
    except (DegenerateInputError, FloatingPointError, KidregError) as exc:
        print(f"kidreg: numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
