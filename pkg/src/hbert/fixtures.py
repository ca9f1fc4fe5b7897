"""Bundled desk-scale fixture: ontology trees and phenotype spec."""

from __future__ import annotations

from pathlib import Path

from .ontology import HierarchyTree, SystemId, load_tree

DATA_DIR = Path(__file__).resolve().parent / "data"
DX_HIERARCHY = DATA_DIR / "icd10_fixture.tsv"
RX_HIERARCHY = DATA_DIR / "atc_fixture.tsv"
PHENOTYPE_SPEC = DATA_DIR / "phenotypes.yaml"


def fixture_trees(dx_depth: int | None = None, rx_depth: int | None = None
                  ) -> tuple[HierarchyTree, HierarchyTree]:
    return (load_tree(DX_HIERARCHY, SystemId.DIAGNOSIS, dx_depth),
            load_tree(RX_HIERARCHY, SystemId.PRESCRIPTION, rx_depth))
