"""Convert the LINQS ``cora.content``/``cora.cites`` pair to the package formats.

Node ids follow the row order of ``cora.content``; class ids are the sorted
class names. Citation direction is dropped and duplicates are merged.

    python scripts/convert_cora.py /path/to/raw data/cora
"""
import gzip
import sys
from pathlib import Path


def main(raw_dir, out_dir):
    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [line.split() for line in (raw_dir / "cora.content").read_text().splitlines() if line]
    index = {r[0]: i for i, r in enumerate(rows)}
    names = sorted({r[-1] for r in rows})
    class_id = {name: k for k, name in enumerate(names)}

    edges = set()
    for line in (raw_dir / "cora.cites").read_text().splitlines():
        if not line.strip():
            continue
        a, b = (index[p] for p in line.split())
        if a != b:
            edges.add((min(a, b), max(a, b)))

    with open(out_dir / "cora.edges", "w") as fh:
        fh.write(f"# cora citation graph, {len(rows)} nodes, {len(edges)} undirected edges\n")
        for u, v in sorted(edges):
            fh.write(f"{u} {v}\n")
    with gzip.open(out_dir / "cora.features.csv.gz", "wt") as fh:
        for r in rows:
            fh.write(",".join(r[1:-1]) + "\n")
    with open(out_dir / "cora.labels", "w") as fh:
        for i, r in enumerate(rows):
            fh.write(f"{i} {class_id[r[-1]]}\n")
    with open(out_dir / "classes.txt", "w") as fh:
        fh.write("\n".join(names) + "\n")


if __name__ == "__main__":
    main(*sys.argv[1:3])
