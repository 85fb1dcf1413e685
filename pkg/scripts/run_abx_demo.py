"""End-to-end ABX session demo on a toy codec.

Builds a small session plan, renders every stimulus with the toy
invertible codec, serves the session over HTTP, optionally plays it
through with a scripted observer, and fits the resulting trial log.
With --keep-serving the server stays up for an external client (for
example the browser runner) instead of the scripted observer.

Example:
    python3 scripts/run_abx_demo.py --trials-per-cell 5 --scales 0.5,0.7
"""

import argparse
import json
import tempfile
import urllib.request
from pathlib import Path

import numpy as np

from fovmet.features import load_weights, write_orthonormal_codec
from fovmet.geometry import PoolingConfig
from fovmet.psychometrics import fit_psychometric, format_fit_report, read_trials
from fovmet.server import serve_sessions
from fovmet.session import build_session_plan, render_stimuli, save_plan


def scripted_observer(base, session_id, plan, seed):
    """Answers matching the planted key 80% of the time."""
    rng = np.random.default_rng(seed)
    while True:
        with urllib.request.urlopen(f"{base}/sessions/{session_id}/trials/next") as r:
            trial = json.loads(r.read())
        if trial["done"]:
            return
        spec = plan.trials[trial["index"]]
        truth = spec.answer
        choice = truth if rng.random() < 0.8 else ("B" if truth == "A" else "A")
        body = json.dumps({
            "index": trial["index"],
            "response": choice,
            "response_time_ms": float(rng.lognormal(6.2, 0.3)),
            "timestamp": "demo",
        }).encode()
        req = urllib.request.Request(
            f"{base}/sessions/{session_id}/responses", data=body
        )
        with urllib.request.urlopen(req) as r:
            progress = json.loads(r.read())
        print(f"trial {trial['index']:3d} -> {choice} "
              f"({progress['n_answered']}/{progress['n_trials']})")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--scales", default="0.5,0.7")
    ap.add_argument("--trials-per-cell", type=int, default=3)
    ap.add_argument("--alpha", type=float, default=0.6)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--port", type=int, default=0)
    ap.add_argument("--workdir", help="keep artifacts here instead of a tempdir")
    ap.add_argument("--keep-serving", action="store_true",
                    help="serve until interrupted instead of running the observer")
    args = ap.parse_args()

    scales = [float(s) for s in args.scales.split(",")]
    workdir = Path(args.workdir) if args.workdir else Path(
        tempfile.mkdtemp(prefix="abx-demo-")
    )
    (workdir / "stimuli").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(args.seed)
    images = {
        f"img{k}": rng.random((3, args.size, args.size)).astype(np.float32)
        for k in range(2)
    }
    plan = build_session_plan(
        sorted(images), scales, repetitions=args.trials_per_cell,
        seed=args.seed, session_id="abx-demo",
    )
    save_plan(plan, workdir / "plan.json")

    enc_p, dec_p = write_orthonormal_codec(workdir / "codec", image_size=args.size)
    config = PoolingConfig(scale=scales[0], image_size=args.size, min_region_area=4)
    render_stimuli(
        plan, images, load_weights(enc_p), load_weights(dec_p), config,
        workdir / "stimuli", alpha=args.alpha,
    )
    print(f"{len(plan)} trials, {len(plan.stimuli)} stimuli under {workdir}")

    server = serve_sessions(plan, workdir / "stimuli", workdir / "logs",
                            port=args.port)
    print(f"serving {server.base_url}/sessions/{plan.session_id}")
    try:
        if args.keep_serving:
            server.serve_forever()
        else:
            scripted_observer(server.base_url, plan.session_id, plan, args.seed)
            records = read_trials(server.log_path(plan.session_id))
            fits = [
                fit_psychometric(records, cond)
                for cond in sorted({t.condition for t in records})
                if len({t.scale for t in records if t.condition == cond}) >= 2
            ]
            if fits:
                print(format_fit_report(fits))
            print(f"log: {server.log_path(plan.session_id)}")
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
