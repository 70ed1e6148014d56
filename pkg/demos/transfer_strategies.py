"""
Scratch, full and head fine-tuning under a tight budget
=======================================================

All three strategies train on the same non-IID target clients. FT and HT
start from one model pre-trained on the shifted source set.
"""

from dpfl import analysis, federation
from dpfl.config import build_experiment, config_from_dict

SEED = 0

# the bundled fixture: 10-class mixture, rotation shift, 10 clients, alpha=1
cfg = config_from_dict({"federation": {"master_seed": SEED, "strategy": "FT"}, "privacy": {"epsilon": 1.0}})
exp = build_experiment(cfg)
print("clients:", exp.partition.client_sizes.tolist())
print("sigma at eps=1:", round(exp.privacy.sigma, 3))

theta0 = federation.initial_params(exp.spec, exp.pair.source, exp.federation)
traces = []
for strategy in ("ST", "FT", "HT"):
    for eps in (1.0, 9.0):
        cfg = config_from_dict({"federation": {"master_seed": SEED, "strategy": strategy},
                                "privacy": {"epsilon": eps}})
        e = build_experiment(cfg)
        init = None if strategy == "ST" else theta0
        trace = federation.run(e.spec, e.pair, e.partition, e.federation, e.privacy, e.test, init=init)
        trace.labels = {"dataset": "fixture", "model_kind": "mlp1", "epsilon": eps, "total_rounds": 128,
                        "num_clients": 10, "alpha": 1.0, "seed": SEED, "strategy": strategy}
        traces.append(trace)

# best accuracy per cell, HT minus FT, and relative gain over ST
for row in sorted(analysis.summarize(traces), key=lambda r: (r["epsilon"], r["strategy"])):
    delta = row["delta_ht_ft"]
    print(f"eps={row['epsilon']:<4} {row['strategy']}  best={row['best_acc']:.3f}  "
          f"HT-FT={delta:+.3f}  vs ST={row['rel_acc_vs_st']:+.1f}%")
