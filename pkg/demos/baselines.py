"""Residual memory left by the cluster model, PCA and factor analysis.

With the same number of factors, each model leaves a residual per stock. We
compare the share of each stock's plain-series memory (integrated ACF) that
survives in that residual.
"""

import numpy as np

from logvol import benchmark_models as bm
from logvol import factor_pipeline as fp
from logvol.synth import SynthSpec, generate_panel

spec = SynthSpec(60, 3000, (20, 20, 20), market_memory=0.6, cluster_memory=(0.8, 0.8, 0.8), seed=1)
panel, _ = generate_panel(spec)
lv = fp.log_abs_transform(fp.log_returns(panel), panel.tickers)

dec = fp.decompose(lv, "eigen", n_perm=None)
rep = fp.memory_filtration(dec.stages(lv.omega), dec.clustering.labels)
F = len(fp.select_cluster_factors(rep)) + 1
print(f"factors compared: {F} (market plus selected clusters)")

base = rep.eta[:, 0]
pca_res, _ = bm.pca_residual_panel(lv.omega, F)
fa_fit, fa_res = bm.fa_fit_varimax(lv.omega, F)
cdfs = {"cluster model": bm.cdf_from_fractions(fp.residual_fraction(rep)),
        "PCA": bm.residual_memory_cdf(pca_res, base),
        "factor analysis": bm.residual_memory_cdf(fa_res, base)}

print("\nmodel             90% of stocks keep at most   share below 30%")
for name, cdf in cdfs.items():
    print(f"{name:16s}  {cdf.quantile(0.9):26.3f}   {cdf.share_below(0.3):15.2f}")
print(f"\nresidual variance: PCA {np.sum(pca_res ** 2):.0f}, FA {np.sum(fa_res ** 2):.0f}"
      f" (Heywood case: {fa_fit.heywood})")
