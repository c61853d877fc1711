"""Print finite-difference relative errors for every primitive and both networks."""
import numpy as np

from tumorgraph import autodiff as ad
from tumorgraph.gnn import GnnConfig, GraphSageNet, gnn_forward
from tumorgraph.gradcheck import check_function, check_parameters, primitive_cases
from tumorgraph.graph import BrainGraph
from tumorgraph.refine import CnnConfig, RefineCNN


def main(seed: int = 0):
    rng = np.random.default_rng(seed)
    for name, (fn, inputs) in primitive_cases(rng).items():
        print(f"{name:<24} {max(check_function(fn, inputs, rng)):.2e}")
    with ad.precision(np.float64):
        gnn = GraphSageNet(GnnConfig(depth=6, hidden=16), rng)
        iu = np.array(np.triu_indices(12, 1)).T
        g = BrainGraph(rng.standard_normal((12, 20)), iu[rng.random(len(iu)) < 0.3], rng.integers(0, 4, 12))
        g.node_features = g.node_features.astype(np.float64)
        errs = check_parameters(lambda: ad.weighted_cross_entropy(gnn_forward(g, gnn), g.node_labels),
                                gnn.parameters(), rng)
        for k, e in errs.items():
            print(f"gnn.{k:<20} {e:.2e}")
        cnn = RefineCNN(CnnConfig(), rng)
        x, y = rng.standard_normal((8, 8, 8, 8)), rng.integers(0, 4, 512)
        errs = check_parameters(lambda: ad.weighted_cross_entropy(ad.to_rows(cnn(x)), y), cnn.parameters(), rng)
        for k, e in errs.items():
            print(f"cnn.{k:<20} {e:.2e}")


if __name__ == "__main__":
    main()
