#!/usr/bin/env python3
"""Write one synthetic episode as HFD1 dumps plus a manifest, for CLI demos."""

import argparse
import json
from pathlib import Path

import numpy as np

from episeg.store import write_dump
from episeg.synthetic import SyntheticSpec, gen_episode


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/demo_episode")
    ap.add_argument("--shot", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec()
    episode = gen_episode(spec, args.shot, np.random.default_rng(args.seed), class_id="demo")
    supports = []
    for i, dump in enumerate(episode.supports):
        name = f"support_{i}.hfd"
        write_dump(dump, out / name)
        supports.append(name)
    write_dump(episode.query, out / "query.hfd")
    manifest = {"supports": supports, "query": "query.hfd", "class_id": episode.class_id}
    (out / "episode.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(supports)} supports + query + manifest under {out}")
    print(f"try: episeg route --manifest {out / 'episode.json'}")


if __name__ == "__main__":
    main()
