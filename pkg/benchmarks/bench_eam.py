"""Time the compiled EAM kernel against the numpy fallback on a W vacancy supercell.

Usage: python3 benchmarks/bench_eam.py [--setfl PATH] [--cells N] [--batch B] [--repeats R]

Prints one line per backend with the best wall time per batch call and the
maximum force difference between the two backends.
"""

import argparse
import os
import sys
import timeit

import numpy as np

from saddlekit.potentials.eam import EamFs, PairList, _compiled, energy_forces_batch
from saddlekit.potentials.lattice import build_vacancy_supercell
from saddlekit.potentials.setfl import read_setfl

HERE = os.path.dirname(os.path.abspath(__file__))
DEFAULT_SETFL = os.path.join(HERE, os.pardir, "tests", "data", "W_zhou.eam.alloy")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--setfl", default=DEFAULT_SETFL)
    p.add_argument("--cells", type=int, default=4, help="bcc cubes per edge")
    p.add_argument("--batch", type=int, default=21, help="configurations per call (one NEB band)")
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args(argv)

    pot = EamFs.from_tables(read_setfl(args.setfl))
    cell, _ = build_vacancy_supercell(args.cells, 3.165)
    rng = np.random.default_rng(0)
    pos = cell.positions[None] + rng.normal(0.0, 0.03, (args.batch,) + cell.positions.shape)
    pairs = PairList.build(cell.positions, cell.cell, pot.cutoff, 0.5, cell.pbc)
    types = pot.type_indices(cell.species)

    backends = ["numpy"] + (["cython"] if _compiled is not None else [])
    results = {}
    for name in backends:
        call = lambda: energy_forces_batch(pot, pos, cell.cell, types, pairs, backend=name)
        call()
        best = min(timeit.repeat(call, number=1, repeat=args.repeats))
        results[name] = (best, call())
        print(f"{name:7s} {cell.n_atoms} atoms x {args.batch} configs: {best * 1e3:9.2f} ms per call")
    if len(results) == 2:
        (tn, (En, Fn)), (tc, (Ec, Fc)) = results["numpy"], results["cython"]
        print(f"speedup {tn / tc:.1f}x; max |dE| {np.abs(En - Ec).max():.2e} eV; max |dF| {np.abs(Fn - Fc).max():.2e} eV/A")
    else:
        print("compiled kernel not built; only the numpy fallback was timed", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
