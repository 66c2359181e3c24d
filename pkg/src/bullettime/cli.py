"""Batch entry points for every pipeline stage.

`--threads N` pins the BLAS pool and must take effect before numpy loads,
so this module defers all heavy imports into the command bodies and the
entry point scans argv before anything else.

Exit codes: 2 for usage errors, 1 for runtime failures, 0 on success.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys


def _pin_threads(argv) -> None:
    threads = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    if threads is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(threads)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--threads", type=int, default=0,
                        help="pin BLAS threads (0 = leave library default)")
    common.add_argument("--config", help="JSON config file with defaults")
    common.add_argument("--dump-config", action="store_true",
                        help="print the merged run configuration and exit")
    p = argparse.ArgumentParser(prog="bullettime", parents=[common],
                                description="bullet-time pipeline tools")
    subparsers = p.add_subparsers(dest="command")

    class _Sub:
        @staticmethod
        def add_parser(name, **kw):
            return subparsers.add_parser(name, parents=[common], **kw)

    sub = _Sub()

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--scene", default="standard", choices=["standard", "tiny"])
    g.add_argument("--out", required=True)
    g.add_argument("--oracle-samples", type=int, default=256)

    t = sub.add_parser("pretrain", help="photometric pretraining")
    t.add_argument("--data", action="append", required=True)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--holdout", default="2,7")
    t.add_argument("--no-semantic", action="store_true")

    v = sub.add_parser("preview", help="render poses with a checkpoint")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    pose = v.add_mutually_exclusive_group(required=True)
    pose.add_argument("--pose", help="trajectory JSON supplying poses")
    pose.add_argument("--orbit", action="store_true")
    v.add_argument("--n", type=int, default=4)
    v.add_argument("--quality", default="preview",
                   choices=["preview", "refined"])
    v.add_argument("--out", required=True)

    r = sub.add_parser("refine", help="trajectory-aware refinement")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--traj", required=True)
    r.add_argument("--steps", type=int, required=True)
    r.add_argument("--lambda1", type=float, default=0.5)
    r.add_argument("--lambda2", type=float, default=0.25)
    r.add_argument("--lambda3", type=float, default=0.25)
    r.add_argument("--out", required=True)
    r.add_argument("--coarse", type=int, default=10)
    r.add_argument("--fine", type=int, default=0)

    s = sub.add_parser("render-seq", help="render frames along a trajectory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--traj", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--quality", default="preview",
                   choices=["preview", "refined"])

    e = sub.add_parser("eval", help="PSNR/SSIM against ground truth")
    e.add_argument("--ckpt", required=True,
                   help="checkpoint path, or 'oracle' for the analytic field")
    e.add_argument("--data", required=True)
    e.add_argument("--holdout", default="2,7")
    e.add_argument("--out")

    sv = sub.add_parser("serve", help="run the interactive service")
    sv.add_argument("--service-config", dest="service_config", required=True)

    a = sub.add_parser("ablate", help="sweeps mirroring the design studies")
    a.add_argument("--what", required=True,
                   choices=["samples", "blocks", "losses"])
    a.add_argument("--data", required=True)
    a.add_argument("--ckpt")
    a.add_argument("--traj")
    a.add_argument("--steps", type=int, default=150)
    a.add_argument("--out", required=True)
    return p


def _load_merged_config(args) -> dict:
    from . import config as cfgmod

    merged = {
        "seed": args.seed,
        "threads": args.threads,
        "model": cfgmod.to_json(cfgmod.ModelConfig()),
        "render": cfgmod.to_json(cfgmod.RenderConfig()),
        "train": cfgmod.to_json(cfgmod.TrainConfig()),
        "k_views": 4,
        "grid_resolution": 64,
    }
    if args.config:
        with open(args.config) as f:
            user = json.load(f)
        for key, val in user.items():
            if isinstance(val, dict) and key in merged:
                merged[key].update(val)
            else:
                merged[key] = val
    merged["seed"] = args.seed
    return merged


def _configs(merged):
    from . import config as cfgmod

    mcfg = cfgmod.from_json(cfgmod.ModelConfig, merged["model"])
    rcfg = cfgmod.from_json(cfgmod.RenderConfig, merged["render"])
    tcfg = cfgmod.from_json(cfgmod.TrainConfig, merged["train"])
    tcfg.seed = merged["seed"]
    return mcfg, rcfg, tcfg


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def _write_manifest(out_dir: str, args, merged, inputs, outputs) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": merged["seed"],
        "threads": merged["threads"],
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "config": merged,
        "build": _git_describe(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _parse_holdout(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(x) for x in text.split(","))


def _save_ckpt_with_sidecar(store, mcfg, path: str) -> None:
    from . import config as cfgmod
    from .optim import save_checkpoint

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_checkpoint(store, path)
    cfgmod.save_config(mcfg, path + ".json")


def _load_ckpt_with_sidecar(path: str):
    from . import config as cfgmod
    from .optim import load_checkpoint

    store = load_checkpoint(path)
    sidecar = path + ".json"
    if os.path.isfile(sidecar):
        mcfg = cfgmod.load_config(cfgmod.ModelConfig, sidecar)
    else:
        mcfg = cfgmod.ModelConfig()
    return store, mcfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, merged) -> int:
    from .scene import (generate_dataset, ring_rig, standard_scene,
                        tiny_rig, tiny_scene)

    if args.scene == "standard":
        scene = standard_scene(seed=merged["seed"])
        rig = ring_rig()
    else:
        scene = tiny_scene(seed=merged["seed"])
        rig = tiny_rig()
    generate_dataset(scene, rig, args.out, n_dense=args.oracle_samples)
    _write_manifest(args.out, args, merged, [], [args.out])
    print(f"dataset written to {args.out}")
    return 0


def cmd_pretrain(args, merged) -> int:
    from .renderer import init_model
    from .scene import load_dataset
    from .training import pretrain

    mcfg, rcfg, tcfg = _configs(merged)
    if args.no_semantic:
        rcfg.use_semantic = False
    else:
        rcfg.use_semantic = True
    datasets = [load_dataset(d) for d in args.data]
    store = init_model(merged["seed"], mcfg)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    tcfg.log_path = args.out + ".log.jsonl"
    out = pretrain(store, datasets, args.steps, tcfg, rcfg, mcfg,
                   k_views=merged["k_views"],
                   holdout=_parse_holdout(args.holdout),
                   grid_resolution=merged["grid_resolution"])
    _save_ckpt_with_sidecar(store, mcfg, args.out)
    _write_manifest(os.path.dirname(os.path.abspath(args.out)) or ".",
                    args, merged, args.data,
                    [args.out, tcfg.log_path])
    last = out["log"][-1]["loss_total"] if out["log"] else float("nan")
    print(f"pretrained {args.steps} steps, final loss {last:.5f}, "
          f"checkpoint {args.out}")
    return 0


def _render_stops(store, mcfg, rcfg, dataset, traj, n, out_dir, seed,
                  k_views, grid_resolution):
    import numpy as np

    from .camera import select_reference_cameras
    from .renderer import render_image
    from .scene import quantize, save_png
    from .tensor import no_grad
    from .training import DatasetContext, make_refs, trajectory_stops

    ctx = DatasetContext(dataset, grid_resolution)
    os.makedirs(out_dir, exist_ok=True)
    stats_rows = []
    rig = dataset.frames[0].cameras
    with no_grad():
        for i, (u, cam, t) in enumerate(trajectory_stops(traj, dataset, n)):
            sel = select_reference_cameras(cam, rig, k_views)
            refs = make_refs(store, ctx, t, sel, rcfg, mcfg)
            near, far = ctx.near_far(cam)
            out = render_image(
                store.params, refs, cam,
                ctx.grid(t) if rcfg.use_hull else None,
                rcfg, mcfg, near, far,
                rng=np.random.default_rng([seed, i]),
            )
            save_png(os.path.join(out_dir, f"stop_{i:03d}.png"),
                     quantize(out.image_np))
            row = {"stop": i, "u": u, "frame": t, **out.stats}
            stats_rows.append(row)
    with open(os.path.join(out_dir, "stats.json"), "w") as f:
        json.dump(stats_rows, f, indent=2, sort_keys=True)
    return stats_rows


def cmd_preview(args, merged) -> int:
    from .config import REFINED
    from .scene import load_dataset
    from .trajectory import load_trajectory, preset_orbit

    store, mcfg = _load_ckpt_with_sidecar(args.ckpt)
    _, rcfg, _ = _configs(merged)
    if args.quality == "refined":
        rcfg = REFINED
    dataset = load_dataset(args.data)
    if args.orbit:
        traj = preset_orbit([0, 0, 0], 2.6, 0.4, 6,
                            float(dataset.n_frames - 1))
    else:
        traj = load_trajectory(args.pose)
    _render_stops(store, mcfg, rcfg, dataset, traj, args.n, args.out,
                  merged["seed"], merged["k_views"],
                  merged["grid_resolution"])
    _write_manifest(args.out, args, merged,
                    [args.ckpt, args.data], [args.out])
    print(f"{args.n} previews written to {args.out}")
    return 0


def cmd_refine(args, merged) -> int:
    from .scene import load_dataset
    from .trajectory import load_trajectory
    from .training import LossWeights, refine_on_trajectory

    store, mcfg = _load_ckpt_with_sidecar(args.ckpt)
    _, rcfg, tcfg = _configs(merged)
    rcfg.use_semantic = True
    rcfg.coarse_samples = args.coarse
    rcfg.fine_samples = args.fine
    dataset = load_dataset(args.data)
    traj = load_trajectory(args.traj)
    weights = LossWeights(lambda1=args.lambda1, lambda2=args.lambda2,
                          lambda3=args.lambda3)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    tcfg.log_path = args.out + ".log.jsonl"
    res = refine_on_trajectory(store, traj, dataset, weights, args.steps,
                               tcfg, rcfg, mcfg, k_views=merged["k_views"],
                               grid_resolution=merged["grid_resolution"])
    _save_ckpt_with_sidecar(store, mcfg, args.out)
    access_path = args.out + ".access.json"
    with open(access_path, "w") as f:
        json.dump({str(t): v for t, v in sorted(res.cameras_touched.items())},
                  f, indent=2, sort_keys=True)
    _write_manifest(os.path.dirname(os.path.abspath(args.out)) or ".",
                    args, merged, [args.ckpt, args.data, args.traj],
                    [args.out, tcfg.log_path, access_path])
    print(f"refined {args.steps} steps ({res.net_evals} net evals), "
          f"checkpoint {args.out}")
    return 0


def cmd_render_seq(args, merged) -> int:
    from .config import REFINED
    from .scene import load_dataset
    from .trajectory import load_trajectory

    store, mcfg = _load_ckpt_with_sidecar(args.ckpt)
    _, rcfg, _ = _configs(merged)
    if args.quality == "refined":
        rcfg = REFINED
    dataset = load_dataset(args.data)
    traj = load_trajectory(args.traj)
    _render_stops(store, mcfg, rcfg, dataset, traj, args.n, args.out,
                  merged["seed"], merged["k_views"],
                  merged["grid_resolution"])
    _write_manifest(args.out, args, merged,
                    [args.ckpt, args.data, args.traj], [args.out])
    print(f"{args.n} frames written to {args.out}")
    return 0


def cmd_eval(args, merged) -> int:
    from .metrics import evaluation_report, psnr, ssim
    from .scene import load_dataset, oracle_render, quantize

    dataset = load_dataset(args.data)
    holdout = _parse_holdout(args.holdout)
    if args.ckpt == "oracle":
        # plumbing check: the analytic oracle against its own stored frames
        pairs = []
        for t in range(dataset.n_frames):
            for h in holdout:
                cam = dataset.frames[t].cameras[h]
                img, _ = oracle_render(dataset.scene, cam, t,
                                       n_dense=dataset.oracle_samples)
                img = quantize(img).astype("float32") / 255.0
                gt = dataset.frames[t].images[h]
                pairs.append({"frame": t, "cam": int(h),
                              "psnr": psnr(img, gt), "ssim": ssim(img, gt)})
        report = evaluation_report(pairs)
    else:
        from .training import eval_holdout

        store, mcfg = _load_ckpt_with_sidecar(args.ckpt)
        _, rcfg, _ = _configs(merged)
        report = eval_holdout(store, dataset, holdout, rcfg, mcfg,
                              k_views=merged["k_views"],
                              grid_resolution=merged["grid_resolution"])
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as f:
            f.write(text)
    print(text)
    return 0


def cmd_serve(args, merged) -> int:
    import uvicorn

    from .service import create_app, ServiceConfig

    with open(args.service_config) as f:
        scfg = ServiceConfig(**json.load(f))
    app = create_app(scfg)
    uvicorn.run(app, host=scfg.host, port=scfg.port, log_level="info")
    return 0


def cmd_ablate(args, merged) -> int:
    import numpy as np

    from .scene import load_dataset

    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    if args.what == "samples":
        from .config import RenderConfig
        from .trajectory import preset_orbit

        store, mcfg = _load_ckpt_with_sidecar(args.ckpt)
        traj = preset_orbit([0, 0, 0], 2.6, 0.4, 6,
                            float(dataset.n_frames - 1))
        for count in (5, 10, 20, 40, 60):
            rcfg = RenderConfig(coarse_samples=count, use_semantic=True)
            stats = _render_stops(store, mcfg, rcfg, dataset, traj, 4,
                                  os.path.join(args.out, f"samples_{count}"),
                                  merged["seed"], merged["k_views"],
                                  merged["grid_resolution"])
            rows.append({
                "samples": count,
                "net_evals": int(sum(s["net_evals"] for s in stats)),
                "wall_ms": float(sum(s["wall_ms"] for s in stats)),
            })
    elif args.what == "blocks":
        from .config import ModelConfig
        from .renderer import extractor_param_count, init_model

        for blocks in (2, 3, 6, 9):
            mcfg = ModelConfig(light_blocks=blocks)
            store = init_model(merged["seed"], mcfg)
            rows.append({
                "blocks": blocks,
                "extractor_params": extractor_param_count(store.params),
            })
    else:  # losses
        from .training import ablation_arms, run_refinement_arm
        from .trajectory import load_trajectory, preset_orbit

        if args.traj:
            traj = load_trajectory(args.traj)
        else:
            traj = preset_orbit([0, 0, 0], 2.6, 0.4, 6,
                                float(dataset.n_frames - 1))
        store, mcfg = _load_ckpt_with_sidecar(args.ckpt)
        for arm in ablation_arms():
            psnr_val, evals = run_refinement_arm(
                arm, store, dataset, traj, args.steps, merged["seed"], mcfg,
                k_views=merged["k_views"],
                grid_resolution=merged["grid_resolution"],
            )
            rows.append({"arm": arm, "trajectory_psnr": psnr_val,
                         "net_evals": int(evals)})
    path = os.path.join(args.out, "ablation.json")
    with open(path, "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
    _write_manifest(args.out, args, merged, [args.data], [path])
    print(json.dumps(rows, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "preview": cmd_preview,
    "refine": cmd_refine,
    "render-seq": cmd_render_seq,
    "eval": cmd_eval,
    "serve": cmd_serve,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    _pin_threads(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    merged = _load_merged_config(args)
    if args.dump_config:
        print(json.dumps(merged, indent=2, sort_keys=True))
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return COMMANDS[args.command](args, merged)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
