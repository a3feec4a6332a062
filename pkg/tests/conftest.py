import pytest

from a1lite.db import Database
from a1lite.sample import load_sample
from a1lite.simnet import ClusterConfig, spawn_cluster
from a1lite.store import Store


@pytest.fixture
def store():
    return Store(spawn_cluster(ClusterConfig(node_count=5, fault_domain_count=3, rng_seed=1)))


@pytest.fixture
def db():
    return Database(config=ClusterConfig(rng_seed=3), dr_mode="none")


@pytest.fixture(scope="session")
def films():
    """The bundled sample, loaded once without replication."""
    db = Database(config=ClusterConfig(rng_seed=0), dr_mode="none")
    g, report = load_sample(db)
    assert report.ok
    return db


PERSON = {"type": "Person", "kind": "vertex", "primary_key": "id", "fields": [
    {"id": 0, "name": "id", "type": "STRING"},
    {"id": 1, "name": "age", "type": "INT"},
    {"id": 2, "name": "city", "type": "STRING"},
    {"id": 3, "name": "tags", "type": "LIST<STRING>"},
]}
KNOWS = {"type": "knows", "kind": "edge", "fields": [{"id": 0, "name": "since", "type": "INT"}]}


@pytest.fixture
def people(db):
    g = db.create_graph("people")
    g.define_type(PERSON)
    g.define_type(KNOWS)
    return g
