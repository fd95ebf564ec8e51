#!/usr/bin/env python3
"""Generate the bundled synthetic minute profiles (insolation and feeder load classes).

Writes data/profiles_summer.csv and data/profiles_winter.csv with columns
timestamp, ghi_wm2, residential_kw, commercial_kw, industrial_kw.
"""

import argparse
from pathlib import Path

import numpy as np
import pandas as pd

SEASONS = {
    "summer": {"start": "2023-07-02", "sunrise": 6.6, "sunset": 20.4, "peak_ghi": 980.0, "cloudiness": 0.35,
               "res": 1.00, "com": 1.00, "ind": 1.00},
    "winter": {"start": "2023-01-08", "sunrise": 7.2, "sunset": 17.9, "peak_ghi": 640.0, "cloudiness": 0.20,
               "res": 0.80, "com": 0.72, "ind": 0.95},
}


def daily_shape(hours, points):
    xs, ys = zip(*points)
    return np.interp(hours, xs, ys)


RESIDENTIAL = [(0, .42), (4, .36), (6, .45), (8, .55), (11, .58), (14, .68), (17, .88), (19.5, 1.0), (22, .72), (24, .42)]
COMMERCIAL = [(0, .30), (5, .30), (7, .55), (9, .85), (13, 1.0), (16, .97), (18, .75), (20, .45), (24, .30)]
INDUSTRIAL = [(0, .78), (6, .80), (7, .95), (12, 1.0), (16, .97), (18, .85), (22, .80), (24, .78)]


def ar1(rng, n, phi, sigma):
    out = np.empty(n)
    x = 0.0
    for i in range(n):
        x = phi * x + rng.normal(0.0, sigma)
        out[i] = x
    return out


def clear_sky(hours, sunrise, sunset, peak):
    x = (hours - sunrise) / (sunset - sunrise)
    g = np.where((x > 0) & (x < 1), np.sin(np.pi * np.clip(x, 0, 1)) ** 1.3, 0.0)
    return peak * g


def cloud_factor(rng, n, cloudiness):
    # Two-regime (clear / cloudy) process; cloud opacity drifts as an AR(1) walk.
    factor = np.empty(n)
    cloudy = False
    opacity = 0.5
    for i in range(n):
        if cloudy and rng.random() < 0.04:
            cloudy = False
        elif not cloudy and rng.random() < 0.02 * cloudiness / (1 - cloudiness + 1e-9):
            cloudy = True
        opacity = float(np.clip(0.5 + 0.85 * (opacity - 0.5) + rng.normal(0.0, 0.06), 0.2, 0.8))
        factor[i] = 1.0 - opacity if cloudy else rng.uniform(0.97, 1.0)
    return factor


def season_frame(name, days, seed):
    cfg = SEASONS[name]
    rng = np.random.default_rng(seed)
    index = pd.date_range(cfg["start"], periods=days * 1440, freq="min")
    hours = index.hour.to_numpy() + index.minute.to_numpy() / 60.0
    n = len(index)

    day = (index.normalize() - index[0].normalize()).days.to_numpy()
    day_scale = 1.0 + 0.06 * rng.standard_normal(days)[day]
    weekend = index.dayofweek.to_numpy() >= 5

    ghi = clear_sky(hours, cfg["sunrise"], cfg["sunset"], cfg["peak_ghi"]) * cloud_factor(rng, n, cfg["cloudiness"])
    ghi *= np.clip(1.0 + 0.05 * rng.standard_normal(days)[day], 0.8, 1.1)

    res = 1000.0 * cfg["res"] * daily_shape(hours, RESIDENTIAL) * day_scale * (1 + ar1(rng, n, 0.97, 0.006))
    com = 800.0 * cfg["com"] * daily_shape(hours, COMMERCIAL) * day_scale * np.where(weekend, 0.7, 1.0)
    com *= 1 + ar1(rng, n, 0.95, 0.008)
    ind = 600.0 * cfg["ind"] * daily_shape(hours, INDUSTRIAL) * np.where(weekend, 0.85, 1.0)
    ind *= 1 + ar1(rng, n, 0.9, 0.004)

    return pd.DataFrame({
        "timestamp": index.strftime("%Y-%m-%d %H:%M"),
        "ghi_wm2": np.round(np.maximum(ghi, 0.0), 2),
        "residential_kw": np.round(res, 2),
        "commercial_kw": np.round(com, 2),
        "industrial_kw": np.round(ind, 2),
    })


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data")
    parser.add_argument("--days", type=int, default=14)
    parser.add_argument("--seed", type=int, default=20230701)
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(SEASONS):
        frame = season_frame(name, args.days, args.seed + i)
        frame.to_csv(args.out / f"profiles_{name}.csv", index=False)
        print(f"wrote {args.out / f'profiles_{name}.csv'} ({len(frame)} rows)")


if __name__ == "__main__":
    main()
