"""Ledger semantics: accounts, escrow lifecycle, conservation, log replay."""

import random
import threading

import pytest

from sgmarket import wire
from sgmarket.bank import (
    AccountKind,
    AlreadySettled,
    BadReporter,
    BankClient,
    BankCore,
    DuplicateAccount,
    DuplicateEscrow,
    EscrowState,
    InsufficientFunds,
    KindMismatch,
    NonPositiveAmount,
    UnknownAccount,
    UnknownEscrow,
    rpc_handlers,
)

SECRETS = {"clusterA": "sekrit"}


@pytest.fixture()
def core():
    return BankCore(cluster_secrets=SECRETS)


def _funded(core, deposit=10000):
    alice = core.create_account("alice", "USER")
    cluster = core.create_account("clusterA", "CLUSTER")
    core.deposit(alice, deposit)
    return alice, cluster


def test_create_account_starts_at_zero(core):
    alice = core.create_account("alice", "USER")
    assert core.balance(alice) == 0


def test_duplicate_account_rejected(core):
    core.create_account("alice", "USER")
    with pytest.raises(DuplicateAccount):
        core.create_account("alice", "USER")


def test_same_owner_different_kinds_allowed(core):
    a = core.create_account("omni", "CLUSTER")
    b = core.create_account("omni", "USER")
    assert a != b


def test_deposit_arithmetic(core):
    alice = core.create_account("alice", "USER")
    assert core.deposit(alice, 10000) == 10000
    assert core.deposit(alice, 500) == 10500


def test_deposit_zero_rejected(core):
    alice = core.create_account("alice", "USER")
    with pytest.raises(NonPositiveAmount):
        core.deposit(alice, 0)


def test_deposit_unknown_account(core):
    with pytest.raises(UnknownAccount):
        core.deposit("user:nobody", 100)


def test_hold_escrow_moves_funds_out_of_balance(core):
    alice, cluster = _funded(core)
    escrow_id = core.hold_escrow(alice, cluster, 4000, "j" * 32)
    assert core.balance(alice) == 6000
    record = core.get_escrow(escrow_id)
    assert record.state is EscrowState.HELD
    assert record.amount == 4000


def test_hold_escrow_insufficient_funds_changes_nothing(core):
    alice, cluster = _funded(core, deposit=3999)
    with pytest.raises(InsufficientFunds):
        core.hold_escrow(alice, cluster, 4000, "j" * 32)
    assert core.balance(alice) == 3999
    assert core.escrow_records() == []


def test_hold_escrow_duplicate_job_rejected(core):
    alice, cluster = _funded(core)
    core.hold_escrow(alice, cluster, 1000, "j" * 32)
    with pytest.raises(DuplicateEscrow):
        core.hold_escrow(alice, cluster, 1000, "j" * 32)


def test_hold_escrow_kind_checks(core):
    alice, cluster = _funded(core)
    with pytest.raises(KindMismatch):
        core.hold_escrow(cluster, cluster, 100, "a" * 32)
    with pytest.raises(KindMismatch):
        core.hold_escrow(alice, alice, 100, "b" * 32)


def test_settle_completed_pays_the_cluster(core):
    alice, cluster = _funded(core)
    escrow_id = core.hold_escrow(alice, cluster, 2000, "j" * 32)
    record = core.settle_escrow(escrow_id, "COMPLETED", "sekrit")
    assert record.state is EscrowState.RELEASED
    assert core.balance(cluster) == 2000
    assert core.balance(alice) == 8000


def test_settle_failed_refunds_the_user(core):
    alice, cluster = _funded(core)
    escrow_id = core.hold_escrow(alice, cluster, 2000, "j" * 32)
    record = core.settle_escrow(escrow_id, "FAILED", "sekrit")
    assert record.state is EscrowState.REFUNDED
    assert core.balance(alice) == 10000
    assert core.balance(cluster) == 0


def test_settle_twice_reports_already_settled(core):
    alice, cluster = _funded(core)
    escrow_id = core.hold_escrow(alice, cluster, 2000, "j" * 32)
    core.settle_escrow(escrow_id, "COMPLETED", "sekrit")
    with pytest.raises(AlreadySettled):
        core.settle_escrow(escrow_id, "FAILED", "sekrit")
    assert core.balance(alice) == 8000
    assert core.balance(cluster) == 2000


def test_settle_requires_cluster_secret(core):
    alice, cluster = _funded(core)
    escrow_id = core.hold_escrow(alice, cluster, 2000, "j" * 32)
    with pytest.raises(BadReporter):
        core.settle_escrow(escrow_id, "COMPLETED", "wrong")
    assert core.get_escrow(escrow_id).state is EscrowState.HELD


def test_settle_unknown_escrow(core):
    with pytest.raises(UnknownEscrow):
        core.settle_escrow("esc-999999", "COMPLETED", "sekrit")


def test_verify_escrow_matches(core):
    alice, cluster = _funded(core)
    escrow_id = core.hold_escrow(alice, cluster, 400, "j" * 32)
    assert core.verify_escrow(escrow_id, cluster, "j" * 32, 400) is True
    assert core.verify_escrow(escrow_id, cluster, "j" * 32, 401) is False
    assert core.verify_escrow(escrow_id, "cluster:other", "j" * 32, 400) is False
    assert core.verify_escrow(escrow_id, cluster, "k" * 32, 400) is False
    assert core.verify_escrow("esc-000099", cluster, "j" * 32, 400) is False
    core.settle_escrow(escrow_id, "COMPLETED", "sekrit")
    assert core.verify_escrow(escrow_id, cluster, "j" * 32, 400) is False


def test_audit_conservation_through_holds(core):
    alice, cluster = _funded(core, deposit=5000)
    totals = core.audit()
    assert totals["total_balances"] + totals["total_held"] == 5000
    core.hold_escrow(alice, cluster, 1200, "j" * 32)
    totals = core.audit()
    assert totals["total_balances"] + totals["total_held"] == 5000
    assert totals["total_held"] == 1200


# -- randomized operation sequences against a mirror model ---------------------

class _Mirror:
    """Naive independent reimplementation used as the replaying oracle."""

    def __init__(self):
        self.balances = {}
        self.kinds = {}
        self.escrows = {}  # escrow_id -> [payer, payee, amount, job_id, state]
        self.held_jobs = set()
        self.deposited = 0

    def create(self, account_id, kind):
        self.balances[account_id] = 0
        self.kinds[account_id] = kind

    def deposit(self, account_id, amount):
        self.balances[account_id] += amount
        self.deposited += amount

    def hold(self, escrow_id, payer, payee, amount, job_id):
        self.balances[payer] -= amount
        self.escrows[escrow_id] = [payer, payee, amount, job_id, "HELD"]
        self.held_jobs.add(job_id)

    def settle(self, escrow_id, outcome):
        payer, payee, amount, job_id, _ = self.escrows[escrow_id]
        target = payee if outcome == "COMPLETED" else payer
        self.balances[target] += amount
        self.escrows[escrow_id][4] = "RELEASED" if outcome == "COMPLETED" else "REFUNDED"
        self.held_jobs.discard(job_id)

    def total(self):
        held = sum(e[2] for e in self.escrows.values() if e[4] == "HELD")
        return sum(self.balances.values()) + held


def run_random_ops(seed: int, steps: int = 60) -> None:
    rng = random.Random(seed)
    core = BankCore(cluster_secrets={"c0": "s0", "c1": "s1"})
    mirror = _Mirror()
    users = [core.create_account(f"u{i}", "USER") for i in range(3)]
    clusters = [core.create_account(f"c{i}", "CLUSTER") for i in range(2)]
    for account_id in users + clusters:
        mirror.create(account_id, "USER" if account_id.startswith("user") else "CLUSTER")
    job_counter = 0
    open_escrows: list[tuple[str, str]] = []  # (escrow_id, cluster owner)

    for _ in range(steps):
        op = rng.choice(["deposit", "hold", "settle", "audit", "audit"])
        if op == "deposit":
            target = rng.choice(users)
            amount = rng.randint(1, 5000)
            core.deposit(target, amount)
            mirror.deposit(target, amount)
        elif op == "hold":
            payer = rng.choice(users)
            payee = rng.choice(clusters)
            amount = rng.randint(1, 3000)
            job_counter += 1
            job_id = f"{job_counter:032x}"
            try:
                escrow_id = core.hold_escrow(payer, payee, amount, job_id)
            except InsufficientFunds:
                assert mirror.balances[payer] < amount
                continue
            mirror.hold(escrow_id, payer, payee, amount, job_id)
            open_escrows.append((escrow_id, payee.split(":", 1)[1]))
        elif op == "settle" and open_escrows:
            escrow_id, owner = open_escrows.pop(rng.randrange(len(open_escrows)))
            outcome = rng.choice(["COMPLETED", "FAILED"])
            secret = {"c0": "s0", "c1": "s1"}[owner]
            core.settle_escrow(escrow_id, outcome, secret)
            mirror.settle(escrow_id, outcome)
        totals = core.audit()
        assert totals["total_balances"] + totals["total_held"] == mirror.deposited
        assert mirror.total() == mirror.deposited
    assert core.account_balances() == mirror.balances


@pytest.mark.parametrize("seed", range(5))
def test_randomized_operations_match_mirror(seed):
    run_random_ops(seed)


# -- concurrency over real RPC --------------------------------------------------

def test_concurrent_deposits_serialize():
    core = BankCore()
    server = wire.serve("127.0.0.1:0", rpc_handlers(core))
    try:
        client = BankClient(server.address)
        alice = client.create_account("alice", "USER")
        threads = [
            threading.Thread(target=client.deposit, args=(alice, 500))
            for _ in range(2)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert client.balance(alice) == 1000
    finally:
        server.shutdown()


def test_rpc_surface_round_trip():
    core = BankCore(cluster_secrets=SECRETS)
    server = wire.serve("127.0.0.1:0", rpc_handlers(core))
    try:
        client = BankClient(server.address)
        alice = client.create_account("alice", "USER")
        cluster = client.create_account("clusterA", "CLUSTER")
        client.deposit(alice, 9000)
        escrow_id = client.hold_escrow(alice, cluster, 700, "j" * 32)
        assert client.verify_escrow(escrow_id, cluster, "j" * 32, 700) is True
        record = client.settle_escrow(escrow_id, "COMPLETED", "sekrit")
        assert record["state"] == "RELEASED"
        totals = client.audit()
        assert totals["total_balances"] == 9000
        assert totals["total_held"] == 0
        with pytest.raises(wire.RpcError) as err:
            client.deposit("user:ghost", 5)
        assert err.value.app_error_name() == "UnknownAccount"
    finally:
        server.shutdown()


# -- operation log -------------------------------------------------------------

def test_log_replay_reproduces_state(tmp_path):
    log_path = tmp_path / "bank.log"
    core = BankCore(cluster_secrets=SECRETS, log_path=log_path)
    alice, cluster = _funded(core)
    e1 = core.hold_escrow(alice, cluster, 1500, "a" * 32)
    e2 = core.hold_escrow(alice, cluster, 500, "b" * 32)
    core.settle_escrow(e1, "COMPLETED", "sekrit")
    core.settle_escrow(e2, "FAILED", "sekrit")
    core.close()

    replayed = BankCore.replay(log_path.read_bytes().splitlines())
    assert replayed.snapshot() == core.snapshot()
