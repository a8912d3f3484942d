"""Synthetic NYC-like trips used for the bundled sample and for tests.

Run ``python -m farebench.synth OUT.csv`` to regenerate the bundled sample.
"""

from __future__ import annotations

import argparse
import csv
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .preprocess import haversine_km_array

SAMPLE_PATH = Path(__file__).with_name("data") / "sample_trips.csv"
START = datetime(2015, 3, 2, tzinfo=timezone.utc)  # a Monday

# (lat, lon, sd_deg, weight)
_HOTSPOTS = [
    (40.758, -73.985, 0.012, 0.35),  # midtown
    (40.728, -73.995, 0.012, 0.25),  # downtown / village
    (40.780, -73.960, 0.015, 0.20),  # upper east/west
    (40.705, -74.010, 0.008, 0.10),  # financial district
    (40.645, -73.785, 0.004, 0.05),  # JFK
    (40.774, -73.872, 0.003, 0.05),  # LGA
]

_HOURLY = np.array([3, 2, 1, 1, 1, 2, 4, 7, 9, 8, 7, 7, 8, 8, 8, 8, 9, 10, 11, 10, 9, 8, 6, 4], dtype=float)


def congestion(epoch_s: np.ndarray, seed: int) -> np.ndarray:
    """Smooth time-varying fare multiplier: rush-hour profile times a slow
    multi-hour log-normal drift (Ornstein-Uhlenbeck on a 10-minute grid)."""
    t0 = epoch_s.min()
    hours = (epoch_s - t0) / 3600.0
    grid = np.arange(0, hours.max() + 1 / 6, 1 / 6)
    rng = np.random.default_rng([seed, 7])
    tau, sd = 4.0, 0.35
    a = np.exp(-(1 / 6) / tau)
    z = np.empty(len(grid))
    z[0] = rng.normal(0, sd)
    for i in range(1, len(grid)):
        z[i] = a * z[i - 1] + np.sqrt(1 - a * a) * rng.normal(0, sd)
    drift = np.exp(np.interp(hours, grid, z))
    hod = ((epoch_s % 86400) / 3600.0)
    rush = 1.0 + 0.35 * np.exp(-((hod - 8.5) ** 2) / 2.0) + 0.45 * np.exp(-((hod - 18.0) ** 2) / 3.0) - 0.15 * np.exp(-((hod - 3.0) ** 2) / 4.0)
    return rush * drift


def make_trips(n: int, seed: int = 0, days: int = 14, fare_rule: str = "congestion") -> dict[str, np.ndarray]:
    """Clean synthetic trips as raw columns (epoch seconds for the timestamp).

    ``fare_rule`` is ``"congestion"`` (fare = 2.5 + 1.8 * km * congestion) or
    ``"linear"`` (fare = 2.5 + 1.8 * km, deterministic).
    """
    rng = np.random.default_rng(seed)
    p_hour = _HOURLY / _HOURLY.sum()
    day = rng.integers(0, days, size=n)
    hour = rng.choice(24, size=n, p=p_hour)
    sec = rng.integers(0, 3600, size=n)
    epoch = np.sort(START.timestamp() + day * 86400.0 + hour * 3600.0 + sec)

    w = np.array([h[3] for h in _HOTSPOTS])
    spot = rng.choice(len(_HOTSPOTS), size=n, p=w / w.sum())
    centers = np.array([[h[0], h[1]] for h in _HOTSPOTS])
    sds = np.array([h[2] for h in _HOTSPOTS])
    plat = centers[spot, 0] + rng.normal(size=n) * sds[spot]
    plon = centers[spot, 1] + rng.normal(size=n) * sds[spot] * 1.3

    km = np.exp(rng.normal(np.log(2.6), 0.55, size=n))
    km = np.where(spot >= 4, np.exp(rng.normal(np.log(15.0), 0.2, size=n)), km)
    bearing = rng.uniform(0, 2 * np.pi, size=n)
    dlat = km * np.cos(bearing) / 111.2
    dlon = km * np.sin(bearing) / (111.2 * np.cos(np.radians(plat)))
    dlat_, dlon_ = plat + dlat, plon + dlon
    # keep dropoffs inside the city rectangle
    dlat_ = np.clip(dlat_, 40.56, 40.94)
    dlon_ = np.clip(dlon_, -74.25, -73.72)

    dist = haversine_km_array(plat, plon, dlat_, dlon_)
    if fare_rule == "linear":
        fare = 2.5 + 1.8 * dist
    elif fare_rule == "congestion":
        fare = np.round(2.5 + 1.8 * dist * congestion(epoch, seed), 2)
    else:
        raise ValueError(f"unknown fare rule {fare_rule!r}")

    passengers = rng.choice(np.arange(1, 7), size=n, p=[0.70, 0.14, 0.05, 0.03, 0.05, 0.03]).astype(float)
    return {
        "pickup_datetime": epoch,
        "pickup_longitude": plon,
        "pickup_latitude": plat,
        "dropoff_longitude": dlon_,
        "dropoff_latitude": dlat_,
        "passenger_count": passengers,
        "fare_amount": fare,
    }


def correlated_rank2(n: int, n_features: int = 5, level: float = 0.1, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Clean rows on a random 2-D linear subspace, z-scored per column, and a
    copy with Gaussian noise of sd ``level`` (in clean-sd units) added."""
    rng = np.random.default_rng([seed, 2])
    latent = rng.normal(size=(n, 2))
    mix = rng.normal(size=(2, n_features))
    clean = latent @ mix
    clean = (clean - clean.mean(axis=0)) / clean.std(axis=0)
    noisy = clean + level * rng.normal(size=clean.shape)
    return clean, noisy


def _fmt_ts(epoch: float) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC")


def write_sample_csv(path: str | Path, n: int = 10_000, seed: int = 2015) -> None:
    """Write ``n`` data rows with realistic defects: missing coordinates,
    (0, 0) GPS, out-of-range and malformed rows, and fare/location outliers."""
    cols = make_trips(n, seed)
    rng = np.random.default_rng([seed, 1])
    header = ["fare_amount", "pickup_datetime", "pickup_longitude", "pickup_latitude",
              "dropoff_longitude", "dropoff_latitude", "passenger_count"]
    defect = rng.random(n)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(n):
            row = {
                "fare_amount": f"{cols['fare_amount'][i]:.2f}",
                "pickup_datetime": _fmt_ts(cols["pickup_datetime"][i]),
                "pickup_longitude": f"{cols['pickup_longitude'][i]:.6f}",
                "pickup_latitude": f"{cols['pickup_latitude'][i]:.6f}",
                "dropoff_longitude": f"{cols['dropoff_longitude'][i]:.6f}",
                "dropoff_latitude": f"{cols['dropoff_latitude'][i]:.6f}",
                "passenger_count": str(int(cols["passenger_count"][i])),
            }
            d = defect[i]
            if d < 0.008:
                row["pickup_longitude"] = row["pickup_latitude"] = "0"
            elif d < 0.014:
                row["dropoff_longitude"] = ""
            elif d < 0.020:
                row["pickup_latitude"] = "NA"
            elif d < 0.022:
                row["passenger_count"] = "NA"
            elif d < 0.024:
                row["pickup_latitude"] = "91.0"
            elif d < 0.026:
                row["pickup_datetime"] = row["pickup_datetime"].replace(" ", "T", 1)
            elif d < 0.027:
                row["fare_amount"] = "n/a"
            elif d < 0.032:
                row["pickup_latitude"] = f"{39.0 + rng.random():.6f}"
            elif d < 0.036:
                row["fare_amount"] = f"{rng.uniform(150, 400):.2f}"
            elif d < 0.038:
                row["fare_amount"] = f"{-rng.uniform(2, 10):.2f}"
            w.writerow([row[h] for h in header])


def main(argv: list[str] | None = None) -> None:
    ap = argparse.ArgumentParser(description="Write the synthetic trip sample CSV")
    ap.add_argument("out", nargs="?", default=str(SAMPLE_PATH))
    ap.add_argument("--rows", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=2015)
    args = ap.parse_args(argv)
    write_sample_csv(args.out, args.rows, args.seed)


if __name__ == "__main__":
    main()
