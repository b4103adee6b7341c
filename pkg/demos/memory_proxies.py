"""How the three memory measures relate across stocks.

Stocks in ten clusters get cluster-factor memory strengths from 0 to 1. For
each stock we compute the ACF of its log-volatility, the Bartlett cut
``L_cut``, the power-law exponent ``beta_vol`` below the cut and the
integrated ACF ``eta``. Stronger memory means a longer cut, a larger
integral and a flatter decay.
"""

import numpy as np

from logvol import factor_pipeline as fp
from logvol import memory_metrics as mm
from logvol import stats_core as sc
from logvol.synth import SynthSpec, generate_panel

strengths = np.linspace(0.0, 1.0, 10)
spec = SynthSpec(100, 3000, (10,) * 10, market_memory=0.3, cluster_memory=tuple(strengths), seed=0)
panel, truth = generate_panel(spec)
lv = fp.log_abs_transform(fp.log_returns(panel), panel.tickers)
profiles = mm.panel_profiles(lv.omega, lv.tickers)

print("strength  median eta  median L_cut  median beta_vol")
for k, s in enumerate(strengths):
    rows = [p for p, m in zip(profiles, truth.membership) if m == k + 1]
    eta = np.median([p.eta for p in rows])
    lcut = np.median([p.l_cut for p in rows])
    beta = np.nanmedian([p.beta_vol for p in rows])
    print(f"{s:8.2f}  {eta:10.2f}  {lcut:12.0f}  {beta:15.3f}")

eta = np.array([p.eta for p in profiles])
beta = np.array([p.beta_vol for p in profiles])
lcut = np.array([p.l_cut for p in profiles], dtype=float)
ok = np.isfinite(beta)
print("\none-sided Spearman tests")
print("  eta vs beta_vol (less):    rho=%.3f p=%.1e" % sc.spearman(eta[ok], beta[ok], "less"))
print("  eta vs L_cut (greater):    rho=%.3f p=%.1e" % sc.spearman(eta, lcut, "greater"))
print("  L_cut vs beta_vol (less):  rho=%.3f p=%.1e" % sc.spearman(lcut[ok], beta[ok], "less"))
