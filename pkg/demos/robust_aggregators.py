"""How the classic robust rules react to a single loud outlier.

Five clients upload a scalar-ish update; one of them is far away. FedAvg
follows the outlier, the coordinate-wise median and Krum do not, and norm
clipping only softens it.
"""
import torch

from flarena import aggregators as agg

updates = [torch.tensor([v, 1.0 - v], dtype=torch.float64) for v in (0.0, 0.1, 0.2, 0.3)]
updates.append(torch.tensor([10.0, -9.0], dtype=torch.float64))
global_params = torch.zeros(2, dtype=torch.float64)

print("fedavg :", agg.weighted_aggregate(updates, [1] * 5).tolist())
print("median :", agg.coord_median(updates).tolist())
idx, chosen = agg.krum(updates, f=1)
print(f"krum   : picks client {idx} -> {chosen.tolist()}")
print("scores :", [round(float(s), 3) for s in agg.krum_scores(updates, f=1)])
tau = agg.median_delta_norm(updates, global_params)
clipped = agg.norm_clip(updates, global_params, tau)
print(f"clip   : tau={tau:.3f} ->", agg.weighted_aggregate(clipped, [1] * 5).tolist())
