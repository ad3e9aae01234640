"""
Learning the value-function flow map
====================================

Sample solved games, fit a small ReLU network to the values, and push the
learned values back through the forward equation to see how far the
measures drift from the true equilibrium.
"""

from mfgflow import QuadraticModel, TimeGrid, TrainConfig, generate_dataset, train_flow_map
from mfgflow.pipeline import NetworkPredictor, evaluate_reconstruction, sample_pairs

model = QuadraticModel(3)
grid = TimeGrid(model.T, 100)

# 2000 solved games, one random time point each; the full preset uses 4000.
ds, report = generate_dataset(model, grid, n=2000, mode="pointwise", seed=0)
print(f"{ds.n} records, worst Picard gap {max(r['residual'] for r in report):.1e}")

cfg = TrainConfig(epochs=300, width=32, seed=0)
result = train_flow_map(ds, cfg)
print(f"trained {cfg.epochs} epochs in {result.seconds:.1f}s")
for row in result.history:
    if row["test_loss"] is not None and row["epoch"] % 75 == 0:
        print(f"  epoch {row['epoch']:4d}: train {row['train_loss']:.2e}  test {row['test_loss']:.2e}  "
              f"weight bound {row['weight_bound']:.1f}")
print(f"final test loss {result.final_test_loss:.2e}")

net = NetworkPredictor(result.params, result.checkpoint.meta)
ev = evaluate_reconstruction(net, model, grid, sample_pairs(model, 5, seed=1000))
for p in ev.pairs:
    print(f"  pair {p.index}: sup |u - u_hat| {p.sup_error:.3f}, sup |mu - mu_hat| {p.mu_sup_error:.4f}")
print(ev.summary())
