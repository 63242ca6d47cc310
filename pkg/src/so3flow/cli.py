"""Command-line interface: gen-data, train, sample, logprob, eval, check.

Every command is a pure function of its configuration, input files, and
seeds: identical invocations produce byte-identical outputs.  Flags beat
values from ``--config`` (a JSON document); the fully resolved
configuration is written next to each command's outputs.  The only
environment variable honored is ``SO3FLOW_OUTDIR``, which re-roots
relative output paths.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(including training divergence), 3 diagnostic check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kinematics as kin
from . import metrics
from . import so3
from . import synthetic as syn
from .flow import FlowConfig, ProductSO3Flow, load_checkpoint
from .training import (TrainConfig, TrainingDiverged, read_trace, train,
                       write_trace)

MODALITIES = {"prior": "none", "ik": "keypoints-3d", "uplift": "keypoints-2d"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_path(p):
    p = Path(p)
    base = os.environ.get("SO3FLOW_OUTDIR")
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _out_dir(p):
    p = Path(p)
    base = os.environ.get("SO3FLOW_OUTDIR")
    if base and not p.is_absolute():
        p = Path(base) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_config_file(path):
    if path is None:
        return {}
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    return doc


def _resolve(args, config, keys):
    """Merge config-file values under explicit flags; flags win."""
    out = {}
    for key, default in keys.items():
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            out[key] = flag
        elif key in config:
            out[key] = config[key]
        else:
            out[key] = default
    missing = [k for k, v in out.items() if v is None]
    if missing:
        raise UsageError(f"missing required settings: {', '.join(missing)}")
    return out


def _write_resolved(cfg, directory, name="resolved_config.json"):
    with open(directory / name, "w") as f:
        json.dump(cfg, f, indent=1, sort_keys=True)
        f.write("\n")


def _load_skeleton(spec):
    if not spec:
        return None
    if isinstance(spec, str) and (spec.startswith("chain-") or spec == "humanoid-19"):
        return kin.default_skeleton(spec)
    return kin.load_skeleton(spec)


def _load_context(model, ctx_file, count):
    if ctx_file is None:
        if model.config.context_dim > 0:
            raise UsageError("model is conditional: --ctx-file is required")
        return None
    if model.config.context_dim == 0:
        raise UsageError("model is unconditional: --ctx-file not accepted")
    with open(ctx_file) as f:
        doc = json.load(f)
    kp = np.asarray(doc["keypoints"], dtype=np.float64)
    mask = np.asarray(doc["mask"], dtype=np.float64)
    if kp.ndim == 2:
        ctx = model.encode_context(kp, mask)
        return np.broadcast_to(ctx, (count, ctx.size)).copy()
    if kp.shape[0] != count:
        raise UsageError(f"context batch {kp.shape[0]} does not match sample count {count}")
    return model.encode_context(kp, mask)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    config = _load_config_file(args.config)
    cfg = _resolve(args, config, {"spec": None, "n": None, "seed": 0, "out": None})
    spec = syn.load_prior_spec(cfg["spec"])
    if int(cfg["n"]) < 1:
        raise UsageError("n must be at least 1")
    ds = syn.generate(spec, int(cfg["n"]), int(cfg["seed"]))
    out = _out_path(cfg["out"])
    syn.write_dataset(ds, out)
    _write_resolved(cfg, out.parent, out.stem + ".config.json")
    print(f"wrote {out}: n={ds.n} joints={ds.n_joints} "
          f"mean_oracle_log_density={ds.log_density.mean():.6f}")
    return 0


def cmd_train(args):
    config = _load_config_file(args.config)
    cfg = _resolve(args, config, {
        "dataset": None, "out": None, "modality": "prior", "skeleton": "",
        "coupling-layers": 12, "hidden-width": 16, "context-dim": 64,
        "batch-size": 1000, "lr": 5e-3, "decay-factor": 0.5, "decay-every": 2000,
        "steps": 1000, "mask-probability": 0.0, "seed": 0,
        "checkpoint-every": 0, "resume": "",
    })
    if cfg["modality"] not in MODALITIES:
        raise UsageError(f"modality must be one of {sorted(MODALITIES)}")
    ds = syn.read_dataset(cfg["dataset"])
    out = _out_dir(cfg["out"])
    skel = _load_skeleton(cfg["skeleton"])
    conditioning = MODALITIES[cfg["modality"]]

    start_step = 0
    if cfg["resume"]:
        model = load_checkpoint(cfg["resume"])
        prev = read_trace(out / "trace.csv") if (out / "trace.csv").exists() else []
        start_step = prev[-1][0] + 1 if prev else 0
    else:
        prev = []
        if conditioning == "none":
            fc = FlowConfig(n_manifolds=ds.n_joints, n_coupling=int(cfg["coupling-layers"]),
                            hidden_width=int(cfg["hidden-width"]), seed=int(cfg["seed"]))
        else:
            if skel is None:
                raise UsageError("conditional training requires --skeleton")
            fc = FlowConfig(n_manifolds=ds.n_joints, n_coupling=int(cfg["coupling-layers"]),
                            hidden_width=int(cfg["hidden-width"]),
                            context_dim=int(cfg["context-dim"]),
                            n_keypoints=skel.n_keypoints,
                            keypoint_dim=3 if conditioning == "keypoints-3d" else 2,
                            seed=int(cfg["seed"]))
        model = ProductSO3Flow(fc)

    tc = TrainConfig(batch_size=int(cfg["batch-size"]), learning_rate=float(cfg["lr"]),
                     decay_factor=float(cfg["decay-factor"]), decay_every=int(cfg["decay-every"]),
                     max_steps=int(cfg["steps"]), mask_probability=float(cfg["mask-probability"]),
                     seed=int(cfg["seed"]) + start_step, conditioning=conditioning,
                     checkpoint_every=int(cfg["checkpoint-every"]),
                     checkpoint_path=str(out / "checkpoint.bin"))
    trace = prev + train(model, ds, tc, skel=skel, start_step=start_step)
    write_trace(trace, out / "trace.csv")
    _write_resolved(cfg, out)
    print(f"trained {tc.max_steps} steps; final loss {trace[-1][2]:.6f}; "
          f"checkpoint {out / 'checkpoint.bin'}")
    return 0


def cmd_sample(args):
    config = _load_config_file(args.config)
    cfg = _resolve(args, config, {"checkpoint": None, "n": None, "seed": 0,
                                  "ctx-file": "", "out": None})
    model = load_checkpoint(cfg["checkpoint"])
    count = int(cfg["n"])
    if count < 1:
        raise UsageError("n must be at least 1")
    ctx = _load_context(model, cfg["ctx-file"] or None, count)
    poses, logp = model.sample(np.random.default_rng(int(cfg["seed"])), count, ctx)
    ds = syn.PoseDataset(poses, log_density=logp, seed=int(cfg["seed"]))
    out = _out_path(cfg["out"])
    syn.write_dataset(ds, out)
    _write_resolved(cfg, out.parent, out.stem + ".config.json")
    print(f"wrote {out}: n={count} mean_log_prob={logp.mean():.6f}")
    return 0


def cmd_logprob(args):
    config = _load_config_file(args.config)
    cfg = _resolve(args, config, {"checkpoint": None, "dataset": None,
                                  "ctx-file": "", "out": None})
    model = load_checkpoint(cfg["checkpoint"])
    ds = syn.read_dataset(cfg["dataset"])
    ctx = _load_context(model, cfg["ctx-file"] or None, ds.n)
    logp = model.log_prob(ds.poses, ctx)
    out = _out_path(cfg["out"])
    with open(out, "w", newline="") as f:
        f.write("index,log_prob\n")
        for i, v in enumerate(logp):
            f.write(f"{i},{v!r}\n")
    print(f"wrote {out}: n={ds.n} mean_log_prob={logp.mean():.6f}")
    return 0


def _write_curve(report, path):
    values = np.sort(report.values)
    with open(path, "w", newline="") as f:
        f.write("threshold,fraction\n")
        for i, v in enumerate(values):
            f.write(f"{v!r},{(i + 1) / values.size!r}\n")


def cmd_eval(args):
    config = _load_config_file(args.config)
    cfg = _resolve(args, config, {
        "checkpoint": None, "dataset": None, "protocol": None, "skeleton": "",
        "n-samples": 10, "n-model-samples": 10000, "distance": "sum_geo",
        "p-m": 0.3, "occlusion": "", "seed": 0, "out": None,
    })
    model = load_checkpoint(cfg["checkpoint"])
    ds = syn.read_dataset(cfg["dataset"])
    out = _out_dir(cfg["out"])
    protocol = cfg["protocol"]
    summary = {}
    if protocol == "prior":
        if model.config.context_dim:
            raise UsageError("prior evaluation needs an unconditional model")
        samples, _ = model.sample(np.random.default_rng(int(cfg["seed"])),
                                  int(cfg["n-model-samples"]))
        skel = _load_skeleton(cfg["skeleton"]) if cfg["distance"] == "mpjpe" else None
        recall, precision = metrics.precision_recall(samples, ds.poses,
                                                     distance=cfg["distance"], skel=skel)
        for rep in (recall, precision):
            metrics.write_report_csv(rep, out / f"{rep.name}.csv")
            _write_curve(rep, out / f"{rep.name}_curve.csv")
            summary[rep.name] = {"mean": rep.mean, "median": rep.median}
    elif protocol in ("ik", "masked-ik", "five-point", "uplift"):
        skel = _load_skeleton(cfg["skeleton"])
        if skel is None:
            raise UsageError(f"{protocol} evaluation requires --skeleton")
        reports = metrics.eval_conditional(
            model, ds, skel, protocol, n_samples=int(cfg["n-samples"]),
            seed=int(cfg["seed"]), p_m=float(cfg["p-m"]),
            occlusion=cfg["occlusion"] or None)
        if protocol == "five-point":
            summary["masked_keypoints"] = sorted(
                int(i) for i in set(range(skel.n_keypoints)) - set(skel.leaf_keypoints.tolist()))
        for rep in reports.values():
            metrics.write_report_csv(rep, out / f"{rep.name}.csv")
            summary[rep.name] = {"mean": rep.mean, "median": rep.median}
    else:
        raise UsageError("protocol must be prior, ik, masked-ik, five-point, or uplift")
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    _write_resolved(cfg, out)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_check(args):
    config = _load_config_file(args.config)
    cfg = _resolve(args, config, {"checkpoint": "", "seed": 0, "n-manifolds": 3,
                                  "coupling-layers": 3, "mc-samples": 100000})
    if cfg["checkpoint"]:
        model = load_checkpoint(cfg["checkpoint"])
    else:
        model = ProductSO3Flow(FlowConfig(n_manifolds=int(cfg["n-manifolds"]),
                                          n_coupling=int(cfg["coupling-layers"]),
                                          seed=int(cfg["seed"])))
    failures = []

    # gradient exactness on a small taped objective
    small = ProductSO3Flow(FlowConfig(n_manifolds=2, n_coupling=2, hidden_width=6,
                                      seed=int(cfg["seed"])))
    small.perturb(np.random.default_rng(int(cfg["seed"]) + 1), scale=0.2)
    poses = so3.haar_quat(np.random.default_rng(int(cfg["seed"]) + 2), (4, 2))
    err = ad.grad_check(lambda P: ad.mean(-small._log_prob_core(P, poses, None)),
                        dict(small.params.items()), h=1e-5)
    ok = err < 1e-4
    print(f"[{'PASS' if ok else 'FAIL'}] gradient check: max rel err {err:.3e} (tol 1e-4)")
    if not ok:
        failures.append("gradient")

    # roundtrip sweep through the full stack
    rng = np.random.default_rng(int(cfg["seed"]) + 3)
    base = so3.haar_quat(rng, (64, model.config.n_manifolds))
    ctx = None
    if model.config.context_dim:
        ctx = np.zeros((64, model.config.context_dim))
    poses, lp_fwd = model.transform_from_base(base, ctx)
    back, lp_inv = model.transform_to_base(poses, ctx)
    geo = so3.geodesic_distance_stable(so3.quat_to_matrix(back), so3.quat_to_matrix(base)).max()
    dlogp = np.abs(lp_fwd - lp_inv).max()
    ok = geo < 1e-8 and dlogp < 1e-9
    print(f"[{'PASS' if ok else 'FAIL'}] roundtrip: max geodesic {geo:.3e} (tol 1e-8), "
          f"logdet mismatch {dlogp:.3e} (tol 1e-9)")
    if not ok:
        failures.append("roundtrip")

    # Monte Carlo normalization
    est, se = metrics.mc_normalization(model, ctx[0] if ctx is not None else None,
                                       n_samples=int(cfg["mc-samples"]),
                                       seed=int(cfg["seed"]) + 4)
    ok = abs(est - 1.0) <= max(3.0 * se, 1e-9)
    print(f"[{'PASS' if ok else 'FAIL'}] normalization: {est:.4f} +- {se:.4f} (within 3 SE of 1)")
    if not ok:
        failures.append("normalization")

    if failures:
        print("failed checks: " + ", ".join(failures))
        return 3
    print("all checks passed")
    return 0


# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="JSON config file; explicit flags override it")


def build_parser():
    parser = _Parser(prog="so3flow", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample a dataset from a synthetic prior spec")
    _add_common(p)
    p.add_argument("--spec", help="prior spec JSON document")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output dataset file")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a flow by maximum likelihood")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--modality", choices=sorted(MODALITIES))
    p.add_argument("--skeleton", help="chain-N, humanoid-19, or a skeleton JSON file")
    p.add_argument("--coupling-layers", type=int)
    p.add_argument("--hidden-width", type=int)
    p.add_argument("--context-dim", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-factor", type=float)
    p.add_argument("--decay-every", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--mask-probability", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw poses from a trained model")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ctx-file", help="JSON with keypoints and mask for conditioning")
    p.add_argument("--out", help="output dataset file (log_prob stored as density)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("logprob", help="evaluate log-densities of a dataset")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--ctx-file")
    p.add_argument("--out", help="output CSV")
    p.set_defaults(func=cmd_logprob)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--protocol", choices=["prior", "ik", "masked-ik", "five-point", "uplift"])
    p.add_argument("--skeleton")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--n-model-samples", type=int)
    p.add_argument("--distance", choices=["sum_geo", "mpjpe"])
    p.add_argument("--p-m", type=float)
    p.add_argument("--occlusion", help="named occlusion group for masked-ik")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run diagnostics against the acceptance tolerances")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-manifolds", type=int)
    p.add_argument("--coupling-layers", type=int)
    p.add_argument("--mc-samples", type=int)
    p.set_defaults(func=cmd_check)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
