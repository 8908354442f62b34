"""Synthetic transactions with a planted calendar of day-types.

Frozen parameterization (tests depend on it; change only with care):

* ``amount``: log-normal, ``log(amount) ~ N(3.5 + sep * AMOUNT_OFFSET[t], 0.9)``,
  rounded to cents.
* ``hour``: mixture of N(10, 1.5), N(15, 2), N(19, 1.5) folded into [0, 24),
  weights ``softmax(sep * HOUR_LOGITS[t])``.
* ``merchant_category``: 12 categories, ``softmax(MCC_BASE + sep * MCC_TILT[t])``.
* ``payment_type``: contactless with probability 0.35, day-type independent.
* ``customer_age``: N(45, 15) clipped to [18, 90], rounded, day-type independent.

Fraud probability is ``base_rate * multiplier[t] * lift`` with
``lift = (1 + 0.95 tanh(2 z)) * MCC_RISK[m] / E_t[MCC_RISK]``: ``z`` is the
standardized log-amount within the day-type and ``m`` the merchant category.
The amount factor is odd in ``z`` so its mean is exactly 1; the merchant
factor is normalized per day-type. The lift is bounded, so no clipping is
needed while ``base_rate * multiplier`` stays below 0.5 / max lift.
"""

from __future__ import annotations

import csv
import datetime as dt
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .dataset import DataError, Feature, FeatureSchema, TransactionTable


class DayType(enum.IntEnum):
    Working = 0
    Saturday = 1
    SundayOrHoliday = 2
    SchoolHoliday = 3


@dataclass(frozen=True)
class CalendarModel:
    start_date: dt.date
    n_days: int
    holiday_dates: frozenset = frozenset()
    school_holiday_ranges: tuple = ()  # (first, last) inclusive date pairs

    def __post_init__(self):
        if self.n_days < 1:
            raise ValueError("n_days must be positive")
        end = self.start_date + dt.timedelta(days=self.n_days - 1)
        object.__setattr__(self, "holiday_dates", frozenset(self.holiday_dates))
        object.__setattr__(self, "school_holiday_ranges", tuple(self.school_holiday_ranges))
        for d in self.holiday_dates:
            if not self.start_date <= d <= end:
                raise ValueError(f"holiday {d} outside calendar")
        for a, b in self.school_holiday_ranges:
            if not (self.start_date <= a <= b <= end):
                raise ValueError(f"school holiday range {a}..{b} outside calendar")

    @property
    def dates(self) -> tuple[dt.date, ...]:
        return tuple(self.start_date + dt.timedelta(days=i) for i in range(self.n_days))

    def day_types(self) -> list[DayType]:
        return [assign_day_type(self, d) for d in self.dates]


def belgian_calendar_2015() -> CalendarModel:
    """March-May 2015 with Belgian public holidays and the Easter school break."""
    return CalendarModel(
        start_date=dt.date(2015, 3, 1),
        n_days=92,
        holiday_dates=frozenset({
            dt.date(2015, 4, 6),   # Easter Monday
            dt.date(2015, 5, 1),   # Labour Day
            dt.date(2015, 5, 14),  # Ascension
            dt.date(2015, 5, 25),  # Whit Monday
        }),
        school_holiday_ranges=((dt.date(2015, 4, 6), dt.date(2015, 4, 17)),),
    )


def assign_day_type(cal: CalendarModel, date: dt.date) -> DayType:
    last = cal.start_date + dt.timedelta(days=cal.n_days - 1)
    if not cal.start_date <= date <= last:
        raise ValueError(f"{date} outside calendar {cal.start_date}..{last}")
    wd = date.weekday()
    if date in cal.holiday_dates or wd == 6:
        return DayType.SundayOrHoliday
    if wd == 5:
        return DayType.Saturday
    if any(a <= date <= b for a, b in cal.school_holiday_ranges):
        return DayType.SchoolHoliday
    return DayType.Working


# --- frozen generative parameters ---------------------------------------------

N_MERCHANT = 12
AMOUNT_LOC, AMOUNT_SCALE = 3.5, 0.9
AMOUNT_OFFSET = np.array([0.0, 0.35, -0.5, 0.2])
HOUR_MEANS = np.array([10.0, 15.0, 19.0])
HOUR_SDS = np.array([1.5, 2.0, 1.5])
HOUR_LOGITS = np.array([
    [0.0, 0.0, 0.0],
    [-0.5, 0.8, 0.0],
    [-1.0, 0.2, 0.9],
    [0.7, 0.4, -0.6],
])
MCC_BASE = -0.1 * np.arange(N_MERCHANT)
MCC_TILT = np.zeros((4, N_MERCHANT))
MCC_TILT[DayType.Saturday, 3:6] = 0.8
MCC_TILT[DayType.SundayOrHoliday, 0:2] = 1.0
MCC_TILT[DayType.SundayOrHoliday, 3:8] = -0.8
MCC_TILT[DayType.SchoolHoliday, 8:10] = 0.9
CONTACTLESS_P = 0.35
AGE_MEAN, AGE_SD = 45.0, 15.0
FRAUD_AMOUNT_GAIN, FRAUD_AMOUNT_STEEPNESS = 0.95, 2.0
MCC_RISK = np.ones(N_MERCHANT)
MCC_RISK[9:] = 8.0


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def merchant_probs(t: int, separation: float) -> np.ndarray:
    return _softmax(MCC_BASE + separation * MCC_TILT[t])


def hour_weights(t: int, separation: float) -> np.ndarray:
    return _softmax(separation * HOUR_LOGITS[t])


def generator_schema() -> FeatureSchema:
    return FeatureSchema((
        Feature("amount", "continuous"),
        Feature("hour", "continuous"),
        Feature("merchant_category", "categorical", N_MERCHANT),
        Feature("payment_type", "binary"),
        Feature("customer_age", "continuous"),
    ))


DEFAULT_MULTIPLIERS = {
    DayType.Working: 1.0,
    DayType.Saturday: 2.0,
    DayType.SundayOrHoliday: 4.0,
    DayType.SchoolHoliday: 2.0,
}


@dataclass(frozen=True)
class GenParams:
    separation: float = 1.0
    tx_per_day: int = 3000
    fraud_base_rate: float = 0.01
    fraud_rate_multiplier: Mapping[DayType, float] = field(
        default_factory=lambda: dict(DEFAULT_MULTIPLIERS))
    seed: int = 42

    def __post_init__(self):
        mult = {DayType[k] if isinstance(k, str) else DayType(k): float(v)
                for k, v in dict(self.fraud_rate_multiplier).items()}
        missing = set(DayType) - set(mult)
        if missing:
            raise ValueError(f"missing fraud multipliers for {sorted(m.name for m in missing)}")
        object.__setattr__(self, "fraud_rate_multiplier", mult)
        if self.separation < 0:
            raise ValueError("separation must be non-negative")
        if self.tx_per_day < 1:
            raise ValueError("tx_per_day must be positive")
        if not 0 < self.fraud_base_rate < 1:
            raise ValueError("fraud_base_rate must be in (0, 1)")
        if min(mult.values()) <= 0:
            raise ValueError("fraud multipliers must be positive")
        if self.fraud_base_rate * max(mult.values()) >= 0.5:
            raise ValueError("fraud_base_rate * max multiplier must stay below 0.5")

    @classmethod
    def from_mapping(cls, cfg: Mapping[str, str]) -> "GenParams":
        """Build from flat ``key = value`` config entries.

        Recognized keys: ``delta`` (or ``separation``), ``tx_per_day``,
        ``fraud_base_rate``, ``seed`` and ``fraud_multiplier.<DayType>``.
        Unrelated keys are ignored.
        """
        kw = {}
        for key in ("separation", "delta"):
            if key in cfg:
                kw["separation"] = float(cfg[key])
        if "tx_per_day" in cfg:
            kw["tx_per_day"] = int(cfg["tx_per_day"])
        if "fraud_base_rate" in cfg:
            kw["fraud_base_rate"] = float(cfg["fraud_base_rate"])
        if "seed" in cfg:
            kw["seed"] = int(cfg["seed"])
        mult = dict(DEFAULT_MULTIPLIERS)
        for key, val in cfg.items():
            if key.startswith("fraud_multiplier."):
                name = key.split(".", 1)[1]
                if name not in DayType.__members__:
                    raise ValueError(f"unknown day type in {key!r}")
                mult[DayType[name]] = float(val)
        kw["fraud_rate_multiplier"] = mult
        return cls(**kw)


def expected_fraud_rate(params: GenParams, t: DayType) -> float:
    return params.fraud_base_rate * params.fraud_rate_multiplier[t]


def _sample_day(rng: np.random.Generator, n: int, t: int, params: GenParams):
    sep = params.separation
    loc = AMOUNT_LOC + sep * AMOUNT_OFFSET[t]
    z = rng.standard_normal(n)
    amount = np.round(np.exp(loc + AMOUNT_SCALE * z), 2)

    comp = rng.choice(3, size=n, p=hour_weights(t, sep))
    hour = np.round(np.mod(rng.normal(HOUR_MEANS[comp], HOUR_SDS[comp]), 24.0), 2)

    probs = merchant_probs(t, sep)
    merchant = rng.choice(N_MERCHANT, size=n, p=probs)
    payment = (rng.random(n) < CONTACTLESS_P).astype(np.float64)
    age = np.round(np.clip(rng.normal(AGE_MEAN, AGE_SD, n), 18, 90))

    lift = (1 + FRAUD_AMOUNT_GAIN * np.tanh(FRAUD_AMOUNT_STEEPNESS * z)) \
        * MCC_RISK[merchant] / float(probs @ MCC_RISK)
    p = np.minimum(expected_fraud_rate(params, DayType(t)) * lift, 1.0)
    label = (rng.random(n) < p).astype(np.int8)
    X = np.column_stack([amount, hour, merchant.astype(np.float64), payment, age])
    return X, label


def generate(cal: CalendarModel, params: GenParams) -> TransactionTable:
    """Sample one table; identical (cal, params) give an identical table."""
    rng = np.random.default_rng(int(params.seed) % 2**64)
    types = cal.day_types()
    blocks, labels, days = [], [], []
    for d, t in enumerate(types):
        n = 0
        while n == 0:
            n = int(rng.poisson(params.tx_per_day))
        X, y = _sample_day(rng, n, int(t), params)
        blocks.append(X)
        labels.append(y)
        days.append(np.full(n, d, np.int64))
    return TransactionTable(
        schema=generator_schema(),
        day_index=np.concatenate(days),
        values=np.vstack(blocks),
        label=np.concatenate(labels),
        day_dates=cal.dates,
    )


def write_daytypes(cal: CalendarModel, path: str | Path, header=()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "day_type"])
        for d, t in zip(cal.dates, cal.day_types()):
            w.writerow([d.isoformat(), t.name])


def read_daytypes(path: str | Path) -> tuple[list[dt.date], list[DayType]]:
    dates, types = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(ln for ln in fh if not ln.startswith("#"))
        if next(reader, None) != ["date", "day_type"]:
            raise DataError(f"{path}: expected header date,day_type")
        for rec in reader:
            dates.append(dt.date.fromisoformat(rec[0]))
            types.append(DayType[rec[1]])
    return dates, types
