"""Bundled fixtures (see ``data/README.md``)."""
import json
from importlib import resources
from pathlib import Path

from .cohort import Cohort, read_cohort_csv
from .pooling import PoolAssignment

TOY_NODES = ("blue", "red", "green")
TOY_TERMS = ("log(age)", "gender", "marker", "log(age):marker")
INFERT_TERMS = ("IA", "SA", "IA:SA")


def data_path(*parts) -> Path:
    return Path(str(resources.files("clrpool").joinpath("data", *parts)))


def load_infert() -> Cohort:
    """82 complete 1:2 strata of the infert study."""
    return read_cohort_csv(data_path("infert.csv"))


def load_toy() -> Cohort:
    return read_cohort_csv(data_path("toy", "toy.csv"))


def load_toy_nodes() -> dict[str, Cohort]:
    return {n: read_cohort_csv(data_path("toy", f"{n}.csv")) for n in TOY_NODES}


def load_toy_assignment() -> PoolAssignment:
    return PoolAssignment.from_dict(json.loads(data_path("toy", "toy_assignment.json").read_text()))
