"""Deviation heat maps and printable fillings for the test split of a corpus.

    woundfill gen-data --out data
    woundfill finetune --data data --out ft
    python scripts/deviation_maps.py --data data --checkpoint ft/encoder.encp --out maps

For each test identity: a vertex-colored OBJ of the reconstruction error
against ground truth, the reconstruction, and the extracted filling as STL.
"""

import argparse
from pathlib import Path

import numpy as np

from woundfill import mesh as M
from woundfill.dataset import load_corpus
from woundfill.decoder import MorphableBasis
from woundfill.encoder import load_checkpoint
from woundfill.training import predict_vertices


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", required=True)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--out", default="maps")
    args = ap.parse_args()

    basis = MorphableBasis.load(Path(args.data) / "basis.mbas")
    corpus = load_corpus(args.data, basis)
    enc, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    errors = []
    vmax = None
    for s in corpus.subset("test"):
        pred = predict_vertices(enc, basis, np.stack(s.renders[:1]))[0]
        recon = M.TriangleMesh(pred, basis.faces)
        dev = M.per_vertex_deviation(recon, s.gt_mesh)
        vmax = vmax or float(np.percentile(dev, 99)) * 2
        tag = f"id_{s.identity_id:04d}"
        M.write_obj(recon, out / f"{tag}_deviation.obj", colors=M.heat_colors(dev, vmax))
        M.write_deviation_csv(dev, out / f"{tag}_deviation.csv")
        res = M.extract_filling(s.damaged_mesh, recon)
        if res.status == "ok":
            M.write_stl(res.filling, out / f"{tag}_filling.stl")
        errors.append(dev.mean())
        print(f"{tag} mean_distance {dev.mean():.6f} filling {res.status} {res.filling.n_faces} faces")
    print(f"test mean_distance {np.mean(errors):.6f}")


if __name__ == "__main__":
    main()
