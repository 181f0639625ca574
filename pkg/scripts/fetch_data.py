"""Fetch the UCI Adult and ProPublica COMPAS tables and write headered CSVs
matching the built-in schemas.

Both raw files ship inside the ``responsibly`` wheel on PyPI, which keeps the
download to one pip call. Usage::

    python scripts/fetch_data.py --out data/raw
    python scripts/fetch_data.py --wheel responsibly-0.1.2-py3-none-any.whl --out data/raw
"""

import argparse
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import pandas as pd

WHEEL_SPEC = "responsibly==0.1.2"
ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status", "occupation",
    "relationship", "race", "sex", "capital-gain", "capital-loss", "hours-per-week", "native-country", "income",
]
COMPAS_COLUMNS = [
    "age", "sex", "race", "priors_count", "juv_fel_count", "juv_misd_count", "juv_other_count",
    "c_charge_degree", "two_year_recid", "decile_score",
]


def download_wheel(dest):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary", ":all:", "-d", str(dest), WHEEL_SPEC],
        check=True,
    )
    return next(Path(dest).glob("responsibly-*.whl"))


def read_member(wheel, suffix):
    with zipfile.ZipFile(wheel) as zf:
        name = next(n for n in zf.namelist() if n.endswith(suffix))
        return zf.read(name).decode("utf-8")


def adult_frame(train_text, test_text):
    opts = dict(names=ADULT_COLUMNS, header=None, skipinitialspace=True, na_values="?", index_col=False)
    train = pd.read_csv(io.StringIO(train_text), **opts)
    # the test file starts with a banner line and labels end in "."
    test = pd.read_csv(io.StringIO(test_text), skiprows=1, **opts)
    df = pd.concat([train, test], ignore_index=True).dropna(how="all")
    df["income"] = df["income"].str.rstrip(".")
    return df


def compas_frame(text):
    """ProPublica's screening filter, restricted to the two race groups the schema maps."""
    df = pd.read_csv(io.StringIO(text))
    keep = (
        df.days_b_screening_arrest.between(-30, 30)
        & (df.is_recid != -1)
        & (df.c_charge_degree != "O")
        & (df.score_text != "N/A")
        & df.race.isin(["African-American", "Caucasian"])
    )
    return df.loc[keep, COMPAS_COLUMNS].reset_index(drop=True)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="data/raw")
    p.add_argument("--wheel", help="local responsibly wheel; downloaded with pip when omitted")
    args = p.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        wheel = Path(args.wheel) if args.wheel else download_wheel(tmp)
        adult = adult_frame(read_member(wheel, "adult/adult.data"), read_member(wheel, "adult/adult.test"))
        compas = compas_frame(read_member(wheel, "compas/compas-scores-two-years.csv"))
    adult.to_csv(out / "adult.csv", index=False)
    compas.to_csv(out / "compas.csv", index=False)
    print(f"adult: {len(adult)} rows -> {out / 'adult.csv'}")
    print(f"compas: {len(compas)} rows -> {out / 'compas.csv'}")


if __name__ == "__main__":
    main()
