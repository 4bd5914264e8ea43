"""Accounts, balances, and escrow settlement.

One registry serves both user and cluster accounts. Funds held in escrow
belong to neither party until settlement, and every state-mutating operation
is serialized behind a single lock, so the conservation invariant
(total balances + total held changes only by deposits) holds at every
observable instant.

Settlement outcomes are reported by the executing cluster front-end,
authenticated with a per-cluster shared secret registered at startup.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from . import wire
from .domain import Money, ServiceError, canonical_json_bytes, parse_money

log = logging.getLogger(__name__)


class AccountKind(str, Enum):
    USER = "USER"
    CLUSTER = "CLUSTER"


class EscrowState(str, Enum):
    HELD = "HELD"
    RELEASED = "RELEASED"
    REFUNDED = "REFUNDED"


class UnknownAccount(ServiceError):
    name = "UnknownAccount"


class DuplicateAccount(ServiceError):
    name = "DuplicateAccount"


class NonPositiveAmount(ServiceError):
    name = "NonPositiveAmount"


class InsufficientFunds(ServiceError):
    name = "InsufficientFunds"


class KindMismatch(ServiceError):
    name = "KindMismatch"


class DuplicateEscrow(ServiceError):
    name = "DuplicateEscrow"


class UnknownEscrow(ServiceError):
    name = "UnknownEscrow"


class AlreadySettled(ServiceError):
    name = "AlreadySettled"


class BadReporter(ServiceError):
    name = "BadReporter"


@dataclass
class Account:
    account_id: str
    owner: str
    kind: AccountKind
    balance: int  # millicredits, never negative

    def to_dict(self) -> dict[str, Any]:
        return {
            "account_id": self.account_id,
            "owner": self.owner,
            "kind": self.kind.value,
            "balance": {"amount": self.balance},
        }


@dataclass
class EscrowRecord:
    escrow_id: str
    payer: str
    payee: str
    amount: int  # millicredits, > 0
    job_id: str
    state: EscrowState

    def to_dict(self) -> dict[str, Any]:
        return {
            "escrow_id": self.escrow_id,
            "payer": self.payer,
            "payee": self.payee,
            "amount": {"amount": self.amount},
            "job_id": self.job_id,
            "state": self.state.value,
        }


def _account_id(owner: str, kind: AccountKind) -> str:
    return f"{kind.value.lower()}:{owner}"


class BankCore:
    """In-memory ledger with an optional append-only operation log."""

    def __init__(
        self,
        cluster_secrets: Mapping[str, str] | None = None,
        log_path: str | Path | None = None,
    ):
        self._lock = threading.RLock()
        self._accounts: dict[str, Account] = {}
        self._escrows: dict[str, EscrowRecord] = {}
        self._held_by_job: dict[str, str] = {}
        self._escrow_seq = 0
        self.cluster_secrets = dict(cluster_secrets or {})
        self._log_file = None
        if log_path is not None:
            self._log_file = open(log_path, "ab")

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    def _log(self, op: str, **args: Any) -> None:
        if self._log_file is None:
            return
        entry = {"op": op, **args}
        self._log_file.write(canonical_json_bytes(entry) + b"\n")
        self._log_file.flush()

    def _get_account(self, account_id: str) -> Account:
        account = self._accounts.get(account_id)
        if account is None:
            raise UnknownAccount(f"no account {account_id!r}")
        return account

    # -- operations -------------------------------------------------------

    def create_account(self, owner: str, kind: AccountKind | str) -> str:
        kind = AccountKind(kind)
        if not owner:
            raise ServiceError("owner must be non-empty")
        with self._lock:
            account_id = self._apply_create_account(owner, kind)
            self._log("create_account", owner=owner, kind=kind.value)
            return account_id

    def _apply_create_account(self, owner: str, kind: AccountKind) -> str:
        account_id = _account_id(owner, kind)
        if account_id in self._accounts:
            raise DuplicateAccount(f"account for ({owner!r}, {kind.value}) exists")
        self._accounts[account_id] = Account(
            account_id=account_id, owner=owner, kind=kind, balance=0
        )
        return account_id

    def deposit(self, account_id: str, amount: int) -> int:
        if amount <= 0:
            raise NonPositiveAmount(f"deposit amount must be > 0, got {amount}")
        with self._lock:
            balance = self._apply_deposit(account_id, amount)
            self._log("deposit", account_id=account_id, amount=amount)
            return balance

    def _apply_deposit(self, account_id: str, amount: int) -> int:
        account = self._get_account(account_id)
        account.balance += amount
        return account.balance

    def balance(self, account_id: str) -> int:
        with self._lock:
            return self._get_account(account_id).balance

    def hold_escrow(self, payer: str, payee: str, amount: int, job_id: str) -> str:
        if amount <= 0:
            raise NonPositiveAmount(f"escrow amount must be > 0, got {amount}")
        with self._lock:
            payer_account = self._get_account(payer)
            payee_account = self._get_account(payee)
            if payer_account.kind is not AccountKind.USER:
                raise KindMismatch(f"payer {payer!r} is not a USER account")
            if payee_account.kind is not AccountKind.CLUSTER:
                raise KindMismatch(f"payee {payee!r} is not a CLUSTER account")
            if job_id in self._held_by_job:
                raise DuplicateEscrow(f"job {job_id!r} already has a held escrow")
            if payer_account.balance < amount:
                raise InsufficientFunds(
                    f"balance {payer_account.balance} < amount {amount}"
                )
            escrow_id = f"esc-{self._escrow_seq + 1:06d}"
            self._apply_hold_escrow(payer, payee, amount, job_id, escrow_id)
            self._log(
                "hold_escrow",
                payer=payer,
                payee=payee,
                amount=amount,
                job_id=job_id,
                escrow_id=escrow_id,
            )
            return escrow_id

    def _apply_hold_escrow(
        self, payer: str, payee: str, amount: int, job_id: str, escrow_id: str
    ) -> None:
        self._escrow_seq += 1
        self._accounts[payer].balance -= amount
        self._escrows[escrow_id] = EscrowRecord(
            escrow_id=escrow_id,
            payer=payer,
            payee=payee,
            amount=amount,
            job_id=job_id,
            state=EscrowState.HELD,
        )
        self._held_by_job[job_id] = escrow_id

    def settle_escrow(
        self, escrow_id: str, outcome: str, reporter_secret: str
    ) -> EscrowRecord:
        if outcome not in ("COMPLETED", "FAILED"):
            raise wire.InvalidParams(f"outcome must be COMPLETED or FAILED, got {outcome!r}")
        with self._lock:
            escrow = self._escrows.get(escrow_id)
            if escrow is None:
                raise UnknownEscrow(f"no escrow {escrow_id!r}")
            if escrow.state is not EscrowState.HELD:
                raise AlreadySettled(f"escrow {escrow_id!r} is {escrow.state.value}")
            payee_owner = self._accounts[escrow.payee].owner
            expected = self.cluster_secrets.get(payee_owner)
            if expected is None or reporter_secret != expected:
                raise BadReporter(f"secret does not match payee cluster {payee_owner!r}")
            self._apply_settle_escrow(escrow_id, outcome)
            self._log("settle_escrow", escrow_id=escrow_id, outcome=outcome)
            return escrow

    def _apply_settle_escrow(self, escrow_id: str, outcome: str) -> None:
        escrow = self._escrows[escrow_id]
        if outcome == "COMPLETED":
            self._accounts[escrow.payee].balance += escrow.amount
            escrow.state = EscrowState.RELEASED
        else:
            self._accounts[escrow.payer].balance += escrow.amount
            escrow.state = EscrowState.REFUNDED
        self._held_by_job.pop(escrow.job_id, None)

    def verify_escrow(
        self, escrow_id: str, payee: str, job_id: str, min_amount: int
    ) -> bool:
        with self._lock:
            escrow = self._escrows.get(escrow_id)
            return (
                escrow is not None
                and escrow.state is EscrowState.HELD
                and escrow.payee == payee
                and escrow.job_id == job_id
                and escrow.amount >= min_amount
            )

    def audit(self) -> dict[str, int]:
        with self._lock:
            total_balances = sum(a.balance for a in self._accounts.values())
            total_held = sum(
                e.amount
                for e in self._escrows.values()
                if e.state is EscrowState.HELD
            )
            return {"total_balances": total_balances, "total_held": total_held}

    # -- inspection (used by tests and the in-process harness) -------------

    def get_escrow(self, escrow_id: str) -> EscrowRecord:
        with self._lock:
            escrow = self._escrows.get(escrow_id)
            if escrow is None:
                raise UnknownEscrow(f"no escrow {escrow_id!r}")
            return escrow

    def escrow_records(self) -> list[EscrowRecord]:
        with self._lock:
            return list(self._escrows.values())

    def account_balances(self) -> dict[str, int]:
        with self._lock:
            return {a.account_id: a.balance for a in self._accounts.values()}

    def snapshot(self) -> dict[str, Any]:
        with self._lock:
            return {
                "accounts": {k: a.to_dict() for k, a in self._accounts.items()},
                "escrows": {k: e.to_dict() for k, e in self._escrows.items()},
            }

    # -- log replay ---------------------------------------------------------

    @classmethod
    def replay(cls, lines: Iterable[bytes | str]) -> "BankCore":
        """Rebuild bank state from an operation log; auth already happened
        when the operations were first applied."""
        core = cls()
        for raw in lines:
            if isinstance(raw, bytes):
                raw = raw.decode("utf-8")
            raw = raw.strip()
            if not raw:
                continue
            entry = json.loads(raw)
            op = entry["op"]
            if op == "create_account":
                core._apply_create_account(entry["owner"], AccountKind(entry["kind"]))
            elif op == "deposit":
                core._apply_deposit(entry["account_id"], entry["amount"])
            elif op == "hold_escrow":
                core._apply_hold_escrow(
                    entry["payer"],
                    entry["payee"],
                    entry["amount"],
                    entry["job_id"],
                    entry["escrow_id"],
                )
            elif op == "settle_escrow":
                core._apply_settle_escrow(entry["escrow_id"], entry["outcome"])
            else:
                raise ValueError(f"unknown log op {op!r}")
        return core


def rpc_handlers(core: BankCore) -> dict[str, wire.Handler]:
    """The bank's RPC surface."""

    def _str_param(params: Mapping[str, Any], key: str) -> str:
        value = params.get(key)
        if not isinstance(value, str) or not value:
            raise wire.InvalidParams(f"{key} must be a non-empty string")
        return value

    def _amount_param(params: Mapping[str, Any], key: str) -> int:
        return parse_money(key, params.get(key)).amount

    def create_account(params: Mapping[str, Any]) -> dict[str, Any]:
        kind = _str_param(params, "kind")
        if kind not in (k.value for k in AccountKind):
            raise wire.InvalidParams(f"kind must be USER or CLUSTER, got {kind!r}")
        account_id = core.create_account(_str_param(params, "owner"), kind)
        return {"account_id": account_id}

    def deposit(params: Mapping[str, Any]) -> dict[str, Any]:
        balance = core.deposit(
            _str_param(params, "account_id"), _amount_param(params, "amount")
        )
        return {"balance": {"amount": balance}}

    def balance(params: Mapping[str, Any]) -> dict[str, Any]:
        return {
            "balance": {"amount": core.balance(_str_param(params, "account_id"))}
        }

    def hold_escrow(params: Mapping[str, Any]) -> dict[str, Any]:
        escrow_id = core.hold_escrow(
            payer=_str_param(params, "payer"),
            payee=_str_param(params, "payee"),
            amount=_amount_param(params, "amount"),
            job_id=_str_param(params, "job_id"),
        )
        return {"escrow_id": escrow_id}

    def settle_escrow(params: Mapping[str, Any]) -> dict[str, Any]:
        record = core.settle_escrow(
            escrow_id=_str_param(params, "escrow_id"),
            outcome=_str_param(params, "outcome"),
            reporter_secret=_str_param(params, "reporter_secret"),
        )
        return record.to_dict()

    def verify_escrow(params: Mapping[str, Any]) -> dict[str, Any]:
        ok = core.verify_escrow(
            escrow_id=_str_param(params, "escrow_id"),
            payee=_str_param(params, "payee"),
            job_id=_str_param(params, "job_id"),
            min_amount=_amount_param(params, "min_amount"),
        )
        return {"ok": ok}

    def audit(params: Mapping[str, Any]) -> dict[str, Any]:
        totals = core.audit()
        return {
            "total_balances": {"amount": totals["total_balances"]},
            "total_held": {"amount": totals["total_held"]},
        }

    return {
        "bank.create_account": create_account,
        "bank.deposit": deposit,
        "bank.balance": balance,
        "bank.hold_escrow": hold_escrow,
        "bank.settle_escrow": settle_escrow,
        "bank.verify_escrow": verify_escrow,
        "bank.audit": audit,
    }


class BankClient:
    """Thin typed wrapper over the bank's RPC methods."""

    def __init__(self, address: str, timeout_ms: int = 5000):
        self.address = address
        self.timeout_ms = timeout_ms

    def _call(self, method: str, **params: Any) -> Any:
        return wire.rpc_call(self.address, method, params, timeout_ms=self.timeout_ms)

    def create_account(self, owner: str, kind: str) -> str:
        return self._call("bank.create_account", owner=owner, kind=kind)["account_id"]

    def deposit(self, account_id: str, amount: int) -> int:
        result = self._call("bank.deposit", account_id=account_id, amount=amount)
        return result["balance"]["amount"]

    def balance(self, account_id: str) -> int:
        return self._call("bank.balance", account_id=account_id)["balance"]["amount"]

    def hold_escrow(self, payer: str, payee: str, amount: int, job_id: str) -> str:
        result = self._call(
            "bank.hold_escrow", payer=payer, payee=payee, amount=amount, job_id=job_id
        )
        return result["escrow_id"]

    def settle_escrow(
        self, escrow_id: str, outcome: str, reporter_secret: str
    ) -> dict[str, Any]:
        return self._call(
            "bank.settle_escrow",
            escrow_id=escrow_id,
            outcome=outcome,
            reporter_secret=reporter_secret,
        )

    def verify_escrow(
        self, escrow_id: str, payee: str, job_id: str, min_amount: int
    ) -> bool:
        return self._call(
            "bank.verify_escrow",
            escrow_id=escrow_id,
            payee=payee,
            job_id=job_id,
            min_amount=min_amount,
        )["ok"]

    def audit(self) -> dict[str, int]:
        result = self._call("bank.audit")
        return {
            "total_balances": result["total_balances"]["amount"],
            "total_held": result["total_held"]["amount"],
        }


def load_config(path: str | Path) -> dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fh:
        config = json.load(fh)
    config.setdefault("listen", "127.0.0.1:7702")
    config.setdefault("cluster_secrets", {})
    config.setdefault("log_path", None)
    return config


def start_service(config: Mapping[str, Any]) -> tuple[wire.Server, BankCore]:
    core = BankCore(
        cluster_secrets=config.get("cluster_secrets") or {},
        log_path=config.get("log_path"),
    )
    server = wire.serve(config["listen"], rpc_handlers(core))
    return server, core


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="sg-bank", description="escrow bank service")
    parser.add_argument("--config", required=True, help="path to bank config JSON")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    config = load_config(args.config)
    server, core = start_service(config)
    log.info("bank listening on %s", server.address)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        core.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
