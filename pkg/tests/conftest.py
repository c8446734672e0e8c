from __future__ import annotations

import logging

import pytest

from gridsim import Grid, Resource
from mbscript import McmcSettings, ModelSpec
from phylo import GammaRates, GtrParams, parse_newick, simulate_alignment
from seqio import write_nexus
from stage_hooks import reset_hooks_manager
from storage_element import StorageElement

FOUR_TAXON_NEWICK = "((A:0.1,B:0.2):0.05,C:0.3,D:0.4);"
SIX_TAXON_NEWICK = "((A:0.08,B:0.12):0.06,(C:0.1,D:0.07):0.05,(E:0.09,F:0.11):0.04);"

PHYLIP_TEXT = " 2 4\nA  ACGT\nB  AC-T\n"
FASTA_TEXT = ">A\nacgu\n>B\nACGT\n"


@pytest.fixture(autouse=True)
def _fresh_hooks():
    reset_hooks_manager()
    yield
    reset_hooks_manager()


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


@pytest.fixture
def storage():
    element = StorageElement(":memory:")
    yield element
    element.close()


@pytest.fixture
def four_taxon_tree():
    return parse_newick(FOUR_TAXON_NEWICK)


@pytest.fixture
def small_alignment():
    tree = parse_newick(SIX_TAXON_NEWICK)
    return simulate_alignment(tree, GtrParams.jukes_cantor(), GammaRates.equal(), 60, seed=7)


@pytest.fixture
def nexus_bytes(small_alignment):
    return write_nexus(small_alignment)


@pytest.fixture
def jc_model():
    return ModelSpec(nst=1, rates="equal")


@pytest.fixture
def quick_settings():
    return McmcSettings(nruns=2, ngen=100, samplefreq=10, nchains=2, seed=42)


@pytest.fixture
def mrbayes_resource():
    return Resource("r1", frozenset({"mrbayes"}), speed=1.0)


@pytest.fixture
def grid(storage, mrbayes_resource):
    return Grid([mrbayes_resource], storage)
