"""Transaction logs, entity catalogs, substitutable-product grouping and a
synthetic tiered distribution system generator.

Transactions are held column-wise (:class:`TransactionLog`) because real logs
run to hundreds of millions of rows; iterating the log still yields plain
:class:`Transaction` records.
"""
from __future__ import annotations

import csv
import io
import logging
import os
from array import array
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import IO, Iterable, Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

EPOCH = date(1970, 1, 1)

MANUFACTURER = "manufacturer"
DISTRIBUTOR = "distributor"
FINAL_BUYER = "final-buyer"
ROLES = (MANUFACTURER, DISTRIBUTOR, FINAL_BUYER)
ROLE_CODES = {role: code for code, role in enumerate(ROLES)}

TRANSACTION_HEADER = ["date", "seller_id", "buyer_id", "product_code", "quantity"]
CATALOG_HEADER = ["entity_id", "role"]
RULES_HEADER = ["product_code", "ingredient", "form", "strength"]

MAX_REPORTED_ERRORS = 1000


def day_number(d: date) -> int:
    return (d - EPOCH).days


def day_to_date(day: int) -> date:
    return EPOCH + timedelta(days=int(day))


def parse_day(text: str) -> int:
    """ISO ``YYYY-MM-DD`` to days since 1970-01-01."""
    if len(text) != 10 or text[4] != "-" or text[7] != "-":
        raise ValueError(f"not an ISO-8601 date: {text!r}")
    return day_number(date.fromisoformat(text))


def year_of(day: int) -> int:
    return day_to_date(day).year


def years_of(days: np.ndarray) -> np.ndarray:
    """Calendar year for each day number (vectorised)."""
    d = np.asarray(days, dtype="int64").astype("datetime64[D]")
    return d.astype("datetime64[Y]").astype("int64") + 1970


@dataclass(frozen=True)
class Transaction:
    date: int
    seller: str
    buyer: str
    product: str
    quantity: int


@dataclass(frozen=True)
class RowError:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


class IngestError(ValueError):
    """Raised when a CSV input fails validation; carries every row error found."""

    def __init__(self, errors: Sequence[RowError]):
        self.errors = list(errors)
        head = "; ".join(str(e) for e in self.errors[:5])
        more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
        super().__init__(f"{len(self.errors)} invalid row(s): {head}{more}")


@dataclass
class EntityCatalog:
    roles: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for eid, role in self.roles.items():
            if role not in ROLE_CODES:
                raise ValueError(f"entity {eid!r}: unknown role {role!r}")

    def __contains__(self, eid: str) -> bool:
        return eid in self.roles

    def __len__(self) -> int:
        return len(self.roles)

    def role(self, eid: str) -> str:
        try:
            return self.roles[eid]
        except KeyError:
            raise KeyError(f"entity {eid!r} is not in the catalog") from None

    def with_role(self, role: str) -> list[str]:
        return sorted(e for e, r in self.roles.items() if r == role)

    @property
    def manufacturers(self) -> list[str]:
        return self.with_role(MANUFACTURER)

    @property
    def distributors(self) -> list[str]:
        return self.with_role(DISTRIBUTOR)

    @property
    def final_buyers(self) -> list[str]:
        return self.with_role(FINAL_BUYER)


@dataclass(frozen=True)
class EquivalenceClass:
    class_id: str
    members: frozenset[str]

    def __post_init__(self):
        if not self.members:
            raise ValueError(f"equivalence class {self.class_id!r} is empty")


class TransactionLog(Sequence[Transaction]):
    """Column-oriented transaction list.

    Entity and product columns hold integer codes into ``entities`` and
    ``products``; ``day`` is days since 1970-01-01.
    """

    def __init__(self, day, seller, buyer, product, quantity,
                 entities: Sequence[str], products: Sequence[str]):
        self.day = np.asarray(day, dtype=np.int32)
        self.seller = np.asarray(seller, dtype=np.int32)
        self.buyer = np.asarray(buyer, dtype=np.int32)
        self.product = np.asarray(product, dtype=np.int32)
        self.quantity = np.asarray(quantity, dtype=np.int64)
        self.entities = list(entities)
        self.products = list(products)
        n = len(self.day)
        if not all(len(c) == n for c in (self.seller, self.buyer, self.product, self.quantity)):
            raise ValueError("transaction columns have different lengths")

    @classmethod
    def empty(cls) -> "TransactionLog":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, z, [], [])

    @classmethod
    def from_transactions(cls, transactions: Iterable[Transaction]) -> "TransactionLog":
        ent: dict[str, int] = {}
        prod: dict[str, int] = {}
        cols: list[list[int]] = [[], [], [], [], []]
        for t in transactions:
            cols[0].append(t.date)
            cols[1].append(ent.setdefault(t.seller, len(ent)))
            cols[2].append(ent.setdefault(t.buyer, len(ent)))
            cols[3].append(prod.setdefault(t.product, len(prod)))
            cols[4].append(t.quantity)
        return cls(*cols, entities=list(ent), products=list(prod))

    def __len__(self) -> int:
        return len(self.day)

    def _record(self, i: int) -> Transaction:
        return Transaction(int(self.day[i]), self.entities[self.seller[i]],
                           self.entities[self.buyer[i]], self.products[self.product[i]],
                           int(self.quantity[i]))

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self._record(k) for k in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self._record(i)

    def __iter__(self) -> Iterator[Transaction]:
        for i in range(len(self)):
            yield self._record(i)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TransactionLog):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self, other))

    def take(self, index) -> "TransactionLog":
        """Rows at ``index`` (integer array or boolean mask), same code tables."""
        return TransactionLog(self.day[index], self.seller[index], self.buyer[index],
                              self.product[index], self.quantity[index],
                              self.entities, self.products)

    def select_products(self, codes: Iterable[str]) -> "TransactionLog":
        wanted = [self.products.index(c) for c in codes if c in self.products]
        return self.take(np.isin(self.product, wanted))

    def select_days(self, start: int, end: int) -> "TransactionLog":
        """Rows with ``start <= day <= end``."""
        return self.take((self.day >= start) & (self.day <= end))

    def role_codes(self, catalog: EntityCatalog) -> np.ndarray:
        """Role code for every entry of ``self.entities``."""
        return np.array([ROLE_CODES[catalog.role(e)] for e in self.entities], dtype=np.int8)

    def years(self) -> list[int]:
        if len(self) == 0:
            return []
        return sorted(set(years_of(np.unique(self.day)).tolist()))

    @property
    def total_quantity(self) -> int:
        return int(self.quantity.sum())


# -- CSV input ----------------------------------------------------------------

def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8")), True
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline=""), True
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def _read_rows(source, header: list[str]) -> Iterator[tuple[int, list[str]]]:
    fh, owned = _open_text(source)
    try:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return
        if [h.strip().lstrip("﻿") for h in first] != header:
            raise IngestError([RowError(1, f"expected header {','.join(header)}, got {','.join(first)}")])
        for row in reader:
            if not row:
                continue
            yield reader.line_num, row
    finally:
        if owned:
            fh.close()


def validate_transactions(source, catalog: EntityCatalog,
                          window: tuple[int, int] | None = None,
                          ) -> tuple[TransactionLog, list[RowError]]:
    """Parse a transaction CSV, collecting every row error instead of stopping.

    Returns the valid rows (sorted stably by date) and the error list.
    """
    ent: dict[str, int] = {}
    prod: dict[str, int] = {}
    date_cache: dict[str, int] = {}
    days, sellers, buyers, products = array("i"), array("i"), array("i"), array("i")
    quantities = array("q")
    errors: list[RowError] = []

    def err(line, msg):
        if len(errors) < MAX_REPORTED_ERRORS:
            errors.append(RowError(line, msg))

    for line, row in _read_rows(source, TRANSACTION_HEADER):
        if len(row) != 5:
            err(line, f"expected 5 fields, got {len(row)}")
            continue
        d, seller, buyer, product, qty = (x.strip() for x in row)
        try:
            day = date_cache[d]
        except KeyError:
            try:
                day = date_cache[d] = parse_day(d)
            except ValueError:
                err(line, f"bad date {d!r}")
                continue
        try:
            q = int(qty)
        except ValueError:
            err(line, f"bad quantity {qty!r}")
            continue
        if q <= 0:
            err(line, f"non-positive quantity {q}")
            continue
        if not product:
            err(line, "empty product code")
            continue
        missing = [e for e in (seller, buyer) if e not in catalog.roles]
        if missing:
            err(line, f"unknown entity {missing[0]!r}")
            continue
        if seller == buyer:
            err(line, f"seller and buyer are both {seller!r}")
            continue
        if window is not None and not window[0] <= day <= window[1]:
            err(line, f"date {d} outside observation window")
            continue
        days.append(day)
        sellers.append(ent.setdefault(seller, len(ent)))
        buyers.append(ent.setdefault(buyer, len(ent)))
        products.append(prod.setdefault(product, len(prod)))
        quantities.append(q)

    day_arr = np.frombuffer(days, dtype=np.int32) if len(days) else np.zeros(0, np.int32)
    order = np.argsort(day_arr, kind="stable")
    log = TransactionLog(
        day_arr[order],
        np.frombuffer(sellers, dtype=np.int32)[order] if len(days) else day_arr,
        np.frombuffer(buyers, dtype=np.int32)[order] if len(days) else day_arr,
        np.frombuffer(products, dtype=np.int32)[order] if len(days) else day_arr,
        np.frombuffer(quantities, dtype=np.int64)[order] if len(days) else day_arr.astype(np.int64),
        entities=list(ent), products=list(prod))
    return log, errors


def parse_transactions(source, catalog: EntityCatalog,
                       window: tuple[int, int] | None = None) -> TransactionLog:
    """Parse and validate a transaction CSV; raises :class:`IngestError` on any bad row."""
    log, errors = validate_transactions(source, catalog, window)
    if errors:
        raise IngestError(errors)
    return log


def write_transactions(log: Iterable[Transaction] | TransactionLog, dest) -> None:
    fh, owned = (open(dest, "w", encoding="utf-8", newline=""), True) \
        if isinstance(dest, (str, os.PathLike)) else (dest, False)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSACTION_HEADER)
        if isinstance(log, TransactionLog):
            dates = {d: day_to_date(d).isoformat() for d in np.unique(log.day).tolist()}
            ents, prods = log.entities, log.products
            for d, s, b, p, q in zip(log.day.tolist(), log.seller.tolist(), log.buyer.tolist(),
                                     log.product.tolist(), log.quantity.tolist()):
                w.writerow((dates[d], ents[s], ents[b], prods[p], q))
        else:
            for t in log:
                w.writerow((day_to_date(t.date).isoformat(), t.seller, t.buyer, t.product, t.quantity))
    finally:
        if owned:
            fh.close()


def parse_catalog(source) -> EntityCatalog:
    roles: dict[str, str] = {}
    errors = []
    for line, row in _read_rows(source, CATALOG_HEADER):
        if len(row) != 2:
            errors.append(RowError(line, f"expected 2 fields, got {len(row)}"))
            continue
        eid, role = row[0].strip(), row[1].strip()
        if role not in ROLE_CODES:
            errors.append(RowError(line, f"unknown role {role!r}"))
        elif eid in roles and roles[eid] != role:
            errors.append(RowError(line, f"entity {eid!r} listed with two roles"))
        else:
            roles[eid] = role
    if errors:
        raise IngestError(errors)
    return EntityCatalog(roles)


def write_catalog(catalog: EntityCatalog, dest) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CATALOG_HEADER)
        for eid in sorted(catalog.roles):
            w.writerow((eid, catalog.roles[eid]))


def parse_rules(source) -> dict[str, tuple[str, str, str]]:
    rules: dict[str, tuple[str, str, str]] = {}
    errors = []
    for line, row in _read_rows(source, RULES_HEADER):
        if len(row) != 4:
            errors.append(RowError(line, f"expected 4 fields, got {len(row)}"))
            continue
        code, ingredient, form, strength = (x.strip() for x in row)
        rules[code] = (ingredient, form, strength)
    if errors:
        raise IngestError(errors)
    return rules


def write_rules(rules: Mapping[str, tuple[str, str, str]], dest) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RULES_HEADER)
        for code in sorted(rules):
            w.writerow((code, *rules[code]))


def group_substitutables(products: Iterable[str],
                         rules: Mapping[str, tuple[str, str, str]]) -> set[EquivalenceClass]:
    """Group product codes sharing an active ingredient.

    Dosage form and strength are deliberately ignored, so e.g. 10 mg and
    20 mg tablets of the same ingredient are substitutes.
    """
    products = set(products)
    missing = sorted(p for p in products if p not in rules)
    if missing:
        raise KeyError(f"no equivalence rule for product(s): {', '.join(missing)}")
    groups: dict[str, set[str]] = {}
    for p in products:
        groups.setdefault(rules[p][0], set()).add(p)
    return {EquivalenceClass(k, frozenset(v)) for k, v in groups.items()}


# -- synthetic systems --------------------------------------------------------

# (code, ingredient, form, strength) of the product lines the generator emits;
# both lines share an ingredient so they form one equivalence class.
SYNTH_LINES = (
    ("OXY-10", "oxycodone", "tablet", "10mg"),
    ("OXY-20", "oxycodone", "tablet", "20mg"),
)


@dataclass(frozen=True)
class SynthSpec:
    n_manufacturers: int = 4
    n_distributors: int = 60
    n_final_buyers: int = 600
    tiers: int = 3
    overlap: float = 0.5
    volume_scale: float = 1.0
    seed: int = 0
    # extra knobs (all have defaults)
    years: int = 1
    start: str = "2012-01-01"
    order_prob: float = 0.3
    volume_sigma: float = 1.0
    buffer_days: tuple[float, float] = (2.0, 30.0)
    restore_days: float = 5.0
    lateral: float = 0.3
    lateral_share: float = 0.2
    buffer_skew: float = 0.0
    retail_share: float = 0.15

    def __post_init__(self):
        if self.tiers < 1:
            raise ValueError("tiers must be >= 1")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        if self.n_manufacturers < 1 or self.n_final_buyers < 1 or self.n_distributors < 0:
            raise ValueError("entity counts must be positive (distributors may be 0)")
        if self.volume_scale <= 0:
            raise ValueError("volume_scale must be positive")
        if self.years < 1:
            raise ValueError("years must be >= 1")
        if not 0.0 < self.order_prob <= 1.0:
            raise ValueError("order_prob must lie in (0, 1]")
        if not 0.0 <= self.lateral <= 1.0:
            raise ValueError("lateral must lie in [0, 1]")
        if not 0.0 <= self.lateral_share < 1.0:
            raise ValueError("lateral_share must lie in [0, 1)")

    @property
    def n_lines(self) -> int:
        return min(len(SYNTH_LINES), self.n_manufacturers)

    def rules(self) -> dict[str, tuple[str, str, str]]:
        return {code: (ing, form, strength) for code, ing, form, strength in SYNTH_LINES[: self.n_lines]}


@dataclass
class _Topology:
    names: list[str]
    roles: list[str]
    tier: np.ndarray            # -1 final buyer, 0 manufacturer, 1.. distributor tiers
    lines: list[set[int]]       # product lines handled by each node
    slots: list[tuple[int, int]]  # (node, line) inventory positions, manufacturers and distributors
    slot_suppliers: list[list[int]]  # supplier slot ids per slot
    slot_weights: list[np.ndarray]
    buyer_slot: np.ndarray      # slot each final buyer orders from
    buyer_rate: np.ndarray      # mean daily demand per final buyer
    lateral_rings: list[tuple[int, int, int]]  # directed a -> b -> c -> a, same tier and line


def _build_topology(spec: SynthSpec, rng: np.random.Generator) -> _Topology:
    n_lines = spec.n_lines
    names: list[str] = []
    roles: list[str] = []
    tiers: list[int] = []
    lines: list[set[int]] = []
    for m in range(spec.n_manufacturers):
        names.append(f"M{m + 1:03d}")
        roles.append(MANUFACTURER)
        tiers.append(0)
        lines.append({m % n_lines})

    n_tiers = min(spec.tiers, spec.n_distributors) if spec.n_distributors else 0
    if n_tiers:
        # geometric tier sizes, hubs on top and a wide periphery
        w = 2.5 ** np.arange(n_tiers)
        sizes = np.maximum(1, np.floor(spec.n_distributors * w / w.sum()).astype(int))
        sizes[-1] += spec.n_distributors - sizes.sum()
        n_shared = int(round(spec.overlap * spec.n_distributors))
        shared = set(rng.choice(spec.n_distributors, size=n_shared, replace=False).tolist()) \
            if n_lines > 1 else set(range(spec.n_distributors))
        d = 0
        for t, size in enumerate(sizes, start=1):
            solo = 0
            for _ in range(size):
                names.append(f"D{d + 1:04d}")
                roles.append(DISTRIBUTOR)
                tiers.append(t)
                if d in shared:
                    lines.append(set(range(n_lines)))
                else:
                    lines.append({solo % n_lines})
                    solo += 1
                d += 1

    tier_arr = np.array(tiers)
    slots: list[tuple[int, int]] = []
    slot_of: dict[tuple[int, int], int] = {}
    for node, ls in enumerate(lines):
        for line in sorted(ls):
            slot_of[(node, line)] = len(slots)
            slots.append((node, line))

    slot_suppliers: list[list[int]] = []
    slot_weights: list[np.ndarray] = []
    for node, line in slots:
        t = tier_arr[node]
        if t == 0:
            slot_suppliers.append([])
            slot_weights.append(np.zeros(0))
            continue
        upper = [n for n in range(len(lines)) if 0 < tier_arr[n] < t and line in lines[n]]
        adjacent = [n for n in upper if tier_arr[n] == t - 1]
        makers = [n for n in range(len(lines)) if tier_arr[n] == 0 and line in lines[n]]
        k = 1 + rng.binomial(2, 0.4)
        chosen: list[int] = []
        for _ in range(k):
            if adjacent and (rng.random() < 0.8 or len(upper) == len(adjacent)):
                pool = adjacent
            elif upper:
                pool = upper
            else:
                pool = makers
            pool = [n for n in pool if n not in chosen]
            if not pool:
                continue
            chosen.append(int(rng.choice(pool)))
        slot_suppliers.append([slot_of[(n, line)] for n in chosen])
        slot_weights.append(rng.dirichlet(np.ones(len(chosen))))

    # final buyers: mostly at the periphery, some at inner tiers
    leaf_tier = max(tiers)
    outlets = [s for s, (node, _) in enumerate(slots) if tier_arr[node] == leaf_tier]
    inner = [s for s, (node, _) in enumerate(slots) if 0 < tier_arr[node] < leaf_tier]
    buyer_slot = np.empty(spec.n_final_buyers, dtype=np.int64)
    for b in range(spec.n_final_buyers):
        if b < len(outlets):
            buyer_slot[b] = outlets[b]   # every outlet position gets at least one buyer
        elif inner and rng.random() < spec.retail_share:
            buyer_slot[b] = inner[rng.integers(len(inner))]
        else:
            buyer_slot[b] = outlets[rng.integers(len(outlets))]
    for b in range(spec.n_final_buyers):
        names.append(f"F{b + 1:05d}")
        roles.append(FINAL_BUYER)
    buyer_rate = spec.volume_scale * rng.lognormal(mean=1.0, sigma=spec.volume_sigma, size=spec.n_final_buyers)

    lateral_rings: list[tuple[int, int, int]] = []
    if spec.lateral > 0:
        for t in range(1, n_tiers + 1):
            for line in range(n_lines):
                members = [slot_of[(n, line)] for n in range(len(lines)) if tier_arr[n] == t and line in lines[n]]
                rng.shuffle(members)
                n_rings = min(len(members) // 3, int(round(spec.lateral * len(members) / 3)))
                for r in range(n_rings):
                    lateral_rings.append(tuple(members[3 * r: 3 * r + 3]))

    return _Topology(names, roles, tier_arr, lines, slots, slot_suppliers, slot_weights,
                     buyer_slot, buyer_rate, lateral_rings)


def generate_synthetic_system(spec: SynthSpec) -> tuple[EntityCatalog, TransactionLog]:
    """Deterministically simulate a tiered flow and return its transaction log.

    Demand is pulled bottom-up each day: final buyers order from their outlet,
    every distributor orders its day's ship-out plus a restocking term from its
    suppliers, and manufacturers ship whatever is ordered. All shipments of a
    day are dated that day, so each distributor's ship-in covers its ship-out
    on every day. Order sizes are log-normal.
    """
    rng = np.random.default_rng(spec.seed)
    topo = _build_topology(spec, rng)
    n_slots = len(topo.slots)
    slot_node = np.array([n for n, _ in topo.slots], dtype=np.int64)
    slot_line = np.array([l for _, l in topo.slots], dtype=np.int64)
    slot_tier = topo.tier[slot_node] if n_slots else np.zeros(0, dtype=np.int64)
    n_nodes_no_buyers = len(topo.lines)

    # expected daily flow per slot, for restocking targets
    expected = np.bincount(topo.buyer_slot, weights=topo.buyer_rate, minlength=n_slots).astype(float)
    # each ring passes a share of its members' flow around, one edge per day;
    # lateral inflow matches lateral outflow on average, so it adds no demand upstream
    rings = np.array(topo.lateral_rings, dtype=np.int64).reshape(-1, 3)
    ring_rate = np.zeros(len(rings))
    for t in sorted(set(slot_tier.tolist()), reverse=True):
        if t == 0:
            continue
        on_tier = slot_tier[rings[:, 0]] == t
        ring_rate[on_tier] = 3.0 * spec.lateral_share * expected[rings[on_tier]].mean(axis=1)
        for s in np.flatnonzero(slot_tier == t):
            for sup, w in zip(topo.slot_suppliers[s], topo.slot_weights[s]):
                expected[sup] += w * expected[s]
    lo, hi = spec.buffer_days
    # product lines differ in how much cover they keep: line l scales by exp(skew * (l - mid))
    line_scale = np.exp(spec.buffer_skew * (slot_line - (spec.n_lines - 1) / 2))
    target = expected * rng.uniform(lo, hi, size=n_slots) * line_scale

    start = day_number(date.fromisoformat(spec.start))
    n_days = 365 * spec.years
    stock = np.zeros(n_slots)
    tiers_desc = [t for t in sorted(set(slot_tier.tolist()), reverse=True) if t > 0]
    tier_slots = {t: np.flatnonzero(slot_tier == t) for t in tiers_desc}
    p_order = spec.order_prob
    mu = np.log(topo.buyer_rate / p_order) - spec.volume_sigma ** 2 / 2

    chunks: list[tuple[np.ndarray, ...]] = []
    buyer_entity = n_nodes_no_buyers + np.arange(spec.n_final_buyers)

    def emit(day, seller_slots, buyer_nodes, line, qty):
        keep = qty > 0
        if keep.any():
            k = int(keep.sum())
            chunks.append((np.full(k, day), slot_node[seller_slots[keep]], buyer_nodes[keep],
                           line[keep], qty[keep]))

    width = max([len(x) for x in topo.slot_suppliers] + [1])
    sup_pad = np.zeros((n_slots, width), dtype=np.int64)
    sup_w = np.zeros((n_slots, width))
    sup_w[:, 0] = 1.0
    for s, (sup, w) in enumerate(zip(topo.slot_suppliers, topo.slot_weights)):
        if sup:
            sup_pad[s, :len(sup)] = sup
            sup_w[s] = 0.0
            sup_w[s, :len(sup)] = w / w.sum()


    for d in range(n_days):
        day = start + d
        outflow = np.zeros(n_slots)
        buys = rng.random(spec.n_final_buyers) < p_order
        qty = np.where(buys, np.maximum(1, np.rint(rng.lognormal(mu, spec.volume_sigma))), 0).astype(np.int64)
        np.add.at(outflow, topo.buyer_slot, qty)
        emit(day, topo.buyer_slot, buyer_entity, slot_line[topo.buyer_slot], qty)

        if len(rings):
            # one ring edge trades per day, so no same-day trade cycles arise
            lq = rng.poisson(ring_rate).astype(np.int64)
            src, dst = rings[:, d % 3], rings[:, (d + 1) % 3]
            np.add.at(outflow, src, lq)
            np.add.at(stock, dst, lq)
            emit(day, src, slot_node[dst], slot_line[dst], lq)

        for t in tiers_desc:
            idx = tier_slots[t]
            restore = np.ceil(np.maximum(0.0, target[idx] - stock[idx]) / spec.restore_days)
            order = (outflow[idx] + restore).astype(np.int64)
            split = rng.multinomial(order, sup_w[idx])
            sup = sup_pad[idx]
            ok = split > 0
            np.add.at(outflow, sup[ok], split[ok])
            stock[idx] += order - outflow[idx]
            rows = np.broadcast_to(idx[:, None], sup.shape)[ok]
            emit(day, sup[ok], slot_node[rows], slot_line[rows], split[ok])

    if chunks:
        cols = [np.concatenate(c) for c in zip(*chunks)]
    else:
        cols = [np.zeros(0, dtype=np.int64)] * 5
    day_col, seller_col, buyer_col, line_col, qty_col = cols
    order = np.argsort(day_col, kind="stable")
    codes = [code for code, *_ in SYNTH_LINES[: spec.n_lines]]
    catalog = EntityCatalog(dict(zip(topo.names, topo.roles)))
    log = TransactionLog(day_col[order], seller_col[order], buyer_col[order], line_col[order],
                         qty_col[order], entities=topo.names, products=codes)
    return catalog, log


def synthetic_rules(spec: SynthSpec) -> dict[str, tuple[str, str, str]]:
    return spec.rules()
