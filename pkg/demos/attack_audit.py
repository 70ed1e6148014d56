"""
Membership and source inference from exposed client updates
===========================================================

"""

import math

from dpfl import attacks, federation
from dpfl.config import build_experiment, config_from_dict

# a shorter run keeps the audit quick; the attack only needs the exposed reports
for eps in (math.inf, 5.0, 1.0):
    cfg = config_from_dict({
        "federation": {"strategy": "ST", "total_rounds": 30, "alpha": 0.1},
        "privacy": {"epsilon": eps, "total_rounds": 30},
        "attack": {"enabled": True},
    })
    exp = build_experiment(cfg)
    trace = federation.run(exp.spec, exp.pair, exp.partition, exp.federation, exp.privacy, exp.test)
    report = attacks.audit(trace, exp.split, exp.spec, exp.train, exp.test)
    null = attacks.audit(trace, exp.split, exp.spec, exp.train, exp.test, shuffle_seed=1)
    print(f"eps={eps:<4} best AUC {report.best_auc:.3f} (round {report.best_auc_round})  "
          f"best ASR {report.best_asr:.3f}  | shuffled truth: AUC {null.per_round_auc.mean():.3f} "
          f"ASR {null.per_round_asr.mean():.3f}")
