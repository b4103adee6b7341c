"""Do clusters persist through time?

Cluster 3 only exists in the second half of the sample: before the switch
its stocks belong to clusters 1 and 2. Re-clustering 20 rolling windows should
match clusters 1 and 2 everywhere and cluster 3 in roughly the later half.
"""

from logvol import factor_pipeline as fp
from logvol import rolling_stability as rs
from logvol.dbht import Clustering
from logvol.synth import SynthSpec, generate_panel

early = [0] * 20 + [1] * 20 + [0] * 10 + [1] * 10
spec = SynthSpec(60, 3001, (20, 20, 20), market_memory=0.6, cluster_memory=(0.8, 0.8, 0.8),
                 early_membership=early, seed=0)
panel, truth = generate_panel(spec)
lv = fp.log_abs_transform(fp.log_returns(panel), panel.tickers)

plan = rs.make_windows(lv.omega.shape[1], 400, 20)
print(f"{plan.n_windows} windows of {plan.length} days, shift {plan.shift}")
records, results = rs.rolling_pipeline(lv, plan, Clustering(truth.membership))

for rec in records:
    line = "".join("#" if rec.cluster in w.matches else "." for w in results)
    print(f"cluster {rec.cluster}: {line}  matched {rec.windows_matched}/{plan.n_windows},"
          f" memory-significant {rec.windows_memory_significant}")
