"""
Per-host features of beaconing and normal servers
=================================================

Generate one synthetic day, group the flows by external host and compare a
few features between the two kinds of server.
"""

import numpy as np

from c2detect import extract_features, generate_day
from c2detect.aggregate import bin_flows, group_by_external_host
from c2detect.features import FEATURE_INDEX
from c2detect.synth import bot_profile, default_config, normal_profile

config = default_config()
day = generate_day(bot_profile(n_hosts=50), normal_profile(n_hosts=200), config, seed=1)
print(f"{len(day.flows)} flows, {len(day.host_kind)} external hosts")

###############################################################################
# One view per external host; flows between two internal devices are discarded.

grouped = group_by_external_host(day.flows, config)
views = {v.host_ip: v for v in grouped.views}
rows = {h: extract_features(v, config) for h, v in views.items()}
kind = day.host_kind

###############################################################################
# Bots send small, regular flows; normal servers send larger bursty ones.

for name in ("packets_per_flow", "bytes_per_flow", "periodicity_cv",
             "dominant_ratio_count_90", "time_gap_mean_ms"):
    j = FEATURE_INDEX[name]
    med = {k: np.nanmedian([fv.as_array()[j] for h, fv in rows.items() if kind[h] == k])
           for k in ("bot", "normal")}
    print(f"{name:26s} bot={med['bot']:10.2f}  normal={med['normal']:10.2f}")

###############################################################################
# The 288 five-minute bins of one host; flow counts add up to the view size.

host = next(h for h in views if kind[h] == "bot")
b = bin_flows(views[host])
print(host, "busy bins:", int((b.flow_count > 0).sum()), "flows:", int(b.flow_count.sum()),
      "=", len(views[host]))
