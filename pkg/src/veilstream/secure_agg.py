"""Dropout-tolerant secure aggregation of transformation tokens.

Every ordered pair of parties shares a pairwise secret from a one-time key
agreement. In a round, party p blinds its token with a nonce that sums one
PRF-derived mask per selected peer, signed by the total order of party
identifiers:

    nonce(p) = sum over peers q with p < q of  +mask(p, q)
             + sum over peers q with p > q of  -mask(p, q)      (mod M)

Summed over any fixed participant set the signs pair off and the masks
cancel, leaving exactly the sum of the tokens. Three peer-selection
variants trade PRF work against connectivity slack:

    clique  every peer, every round
    dream   each round, keep an edge with probability p via one PRF draw,
            then derive the kept edges' masks with a second draw
    epoch   one PRF call per peer per epoch, whose output is split into
            b-bit segments that schedule the edge into one round per
            segment; a round's graph is sparse but known in advance

The epoch variant ("zeph" on the command line) gives W = floor(128/b) * 2^b
rounds per epoch with expected round degree (N-1)/2^b. Privacy holds as
long as each round's graph restricted to honest parties stays connected;
`disconnect_bound` bounds the failure probability of a random graph and
`optimize_b` picks the segment width that maximizes W subject to it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

import hashlib

from .ring import (
    DOMAIN_EDGE,
    DOMAIN_GRAPH,
    DOMAIN_MASK,
    DOMAIN_SELECT,
    MODULUS_DEFAULT,
    DEFAULT_PRF,
    Prf,
    SplitMixPrf,
    check_modulus,
    prf_input,
)
from .tokens import TransformationToken, serialize_token, stream_set_hash

__all__ = [
    "PartyId",
    "PublicIdentity",
    "PairwiseSecret",
    "PairwiseSecrets",
    "IdentityRegistry",
    "UnknownIdentityError",
    "KeyPair",
    "StaticKeyAgreement",
    "EcdhKeyAgreement",
    "setup_pairwise",
    "Counters",
    "nonce_clique",
    "nonce_dream",
    "threshold_for_probability",
    "EpochPlan",
    "plan_epoch",
    "nonce_zeph",
    "MembershipDelta",
    "apply_delta",
    "mask_vector",
    "MaskedToken",
    "mask_token",
    "unmask_aggregate",
    "disconnect_bound",
    "OptimizationResult",
    "optimize_b",
    "RoundCost",
    "simulate_party_counters",
]

logger = logging.getLogger(__name__)

_U128_MAX = (1 << 128) - 1


@dataclass(frozen=True, order=True)
class PartyId:
    """32-byte identity hash; the byte order is the protocol's total order."""

    value: bytes

    def __post_init__(self):
        if len(self.value) != 32:
            raise ValueError("party id must be 32 bytes")

    def short(self) -> str:
        return self.value[:6].hex()

    def __repr__(self):
        return f"PartyId({self.short()})"


@dataclass(frozen=True)
class PublicIdentity:
    """What a party publishes: its id (hash of the material) and material."""

    party_id: PartyId
    material: bytes


@dataclass(frozen=True)
class PairwiseSecret:
    peer: PartyId
    secret: bytes

    def __post_init__(self):
        if len(self.secret) != 16:
            raise ValueError("pairwise secret must be 16 bytes")


class UnknownIdentityError(KeyError):
    """A referenced party id has no registered public identity."""


class IdentityRegistry:
    """Trusted directory mapping party ids to public key material."""

    def __init__(self):
        self._entries: dict[PartyId, PublicIdentity] = {}

    def register(self, identity: PublicIdentity) -> None:
        existing = self._entries.get(identity.party_id)
        if existing is not None and existing.material != identity.material:
            raise ValueError(f"conflicting registration for {identity.party_id!r}")
        self._entries[identity.party_id] = identity

    def get(self, party_id: PartyId) -> PublicIdentity:
        try:
            return self._entries[party_id]
        except KeyError:
            raise UnknownIdentityError(party_id) from None

    def __contains__(self, party_id: PartyId) -> bool:
        return party_id in self._entries

    def __len__(self):
        return len(self._entries)


class KeyPair:
    """One party's key-agreement state."""

    party_id: PartyId

    def public_identity(self) -> PublicIdentity:
        raise NotImplementedError

    def derive_shared(self, peer: PublicIdentity) -> bytes:
        """16-byte pairwise secret, symmetric in the two parties."""
        raise NotImplementedError


class _StaticKeyPair(KeyPair):
    def __init__(self, seed: bytes):
        self._seed = seed
        material = hashlib.sha256(b"static-pub\x00" + seed).digest()
        self._material = material
        self.party_id = PartyId(hashlib.sha256(material).digest())

    def public_identity(self) -> PublicIdentity:
        return PublicIdentity(self.party_id, self._material)

    def derive_shared(self, peer: PublicIdentity) -> bytes:
        lo, hi = sorted([self._material, peer.material])
        return hashlib.sha256(b"static-shared\x00" + lo + hi).digest()[:16]


class StaticKeyAgreement:
    """Deterministic key-agreement double for tests and simulations.

    Pairwise secrets are a hash of the two public materials, so they are
    symmetric and reproducible from a seed. This offers no secrecy at all
    and exists to keep large simulated deployments cheap and deterministic.
    """

    def generate(self, seed: bytes) -> KeyPair:
        return _StaticKeyPair(seed)

    public_material_size = 32


class _EcdhKeyPair(KeyPair):
    def __init__(self, private_key):
        self._private = private_key
        self._material = private_key.public_key().public_bytes(
            serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint
        )
        self.party_id = PartyId(hashlib.sha256(self._material).digest())

    def public_identity(self) -> PublicIdentity:
        return PublicIdentity(self.party_id, self._material)

    def derive_shared(self, peer: PublicIdentity) -> bytes:
        peer_key = ec.EllipticCurvePublicKey.from_encoded_point(
            ec.SECP256R1(), peer.material
        )
        raw = self._private.exchange(ec.ECDH(), peer_key)
        return HKDF(
            algorithm=hashes.SHA256(),
            length=16,
            salt=None,
            info=b"veilstream pairwise v1",
        ).derive(raw)


class EcdhKeyAgreement:
    """Real instantiation: ECDH on secp256r1, HKDF-SHA256 to 16 bytes.

    Party ids are the SHA-256 hash of the uncompressed public point, which
    also yields the total order used for mask signs.
    """

    def generate(self, seed: bytes = b"") -> KeyPair:
        return _EcdhKeyPair(ec.generate_private_key(ec.SECP256R1()))

    public_material_size = 65


def setup_pairwise(
    keypair: KeyPair,
    registry: IdentityRegistry,
    peers: Iterable[PartyId],
) -> "PairwiseSecrets":
    """Resolve peers in the registry and derive all pairwise secrets."""
    secrets = {}
    for pid in peers:
        if pid == keypair.party_id:
            continue
        secrets[pid] = keypair.derive_shared(registry.get(pid))
    return PairwiseSecrets(keypair.party_id, secrets)


class PairwiseSecrets:
    """One party's view of its pairwise secrets, pre-sorted and signed.

    The mask sign for peer q is +1 when self < q and -1 otherwise, fixed by
    the total order on party ids so both endpoints of an edge agree.
    """

    def __init__(self, self_id: PartyId, secrets: Mapping[PartyId, bytes]):
        if self_id in secrets:
            raise ValueError("a party does not share a secret with itself")
        for s in secrets.values():
            if len(s) != 16:
                raise ValueError("pairwise secrets must be 16 bytes")
        self.self_id = self_id
        self._signed = tuple(
            (peer, secrets[peer], self_id < peer) for peer in sorted(secrets)
        )
        self._by_peer = dict(secrets)

    @property
    def peers(self) -> tuple[PartyId, ...]:
        return tuple(p for p, _, _ in self._signed)

    def secret_for(self, peer: PartyId) -> bytes:
        return self._by_peer[peer]

    def sign_for(self, peer: PartyId) -> int:
        return 1 if self.self_id < peer else -1

    def iter_signed(self, members=None):
        """Yield (peer, secret, positive) rows, optionally filtered to a
        membership set."""
        if members is None:
            return iter(self._signed)
        return ((p, s, g) for p, s, g in self._signed if p in members)

    def __len__(self):
        return len(self._signed)


@dataclass
class Counters:
    """Operation counters carried through the protocol hot paths."""

    prf_calls: int = 0
    additions: int = 0
    edge_checks: int = 0

    def snapshot(self) -> tuple[int, int, int]:
        return (self.prf_calls, self.additions, self.edge_checks)


def nonce_clique(
    secrets: PairwiseSecrets,
    round_index: int,
    *,
    prf: Prf = DEFAULT_PRF,
    modulus: int = MODULUS_DEFAULT,
    counters: Optional[Counters] = None,
    members=None,
) -> int:
    """Round nonce over every live peer: N-1 PRF calls and additions."""
    mask = check_modulus(modulus)
    msg = prf_input(DOMAIN_EDGE, 0, round_index)
    evaluate = prf.evaluate
    acc = 0
    n = 0
    for _, secret, positive in secrets.iter_signed(members):
        v = evaluate(secret, msg) & mask
        acc = acc + v if positive else acc - v
        n += 1
    if counters is not None:
        counters.prf_calls += n
        counters.additions += n
    return acc & mask


def threshold_for_probability(p: float) -> int:
    """128-bit comparison threshold c with P[draw <= c] equal to p.

    For p = 2**-b the probability is exact; in general it is within one
    part in 2**128.
    """
    if not 0 <= p <= 1:
        raise ValueError(f"probability must be in [0, 1], got {p}")
    return min(_U128_MAX, round(p * (1 << 128))) - 1


def nonce_dream(
    secrets: PairwiseSecrets,
    round_index: int,
    threshold: int,
    *,
    prf: Prf = DEFAULT_PRF,
    modulus: int = MODULUS_DEFAULT,
    counters: Optional[Counters] = None,
    members=None,
) -> int:
    """Round nonce over a random peer subset drawn per round.

    Each peer costs one selection draw; selected edges cost one further
    PRF call for the mask, so a round totals N-1+l calls and l additions.
    Both endpoints evaluate the same draw on the shared secret, so the
    selected edge set is consistent without communication.
    """
    mask = check_modulus(modulus)
    msg_select = prf_input(DOMAIN_SELECT, 0, round_index)
    msg_edge = prf_input(DOMAIN_EDGE, 0, round_index)
    evaluate = prf.evaluate
    acc = 0
    n = 0
    selected = 0
    for _, secret, positive in secrets.iter_signed(members):
        n += 1
        if evaluate(secret, msg_select) <= threshold:
            v = evaluate(secret, msg_edge) & mask
            acc = acc + v if positive else acc - v
            selected += 1
    if counters is not None:
        counters.prf_calls += n + selected
        counters.additions += selected
    return acc & mask


@dataclass
class EpochPlan:
    """One party's precomputed round graph for an epoch.

    peer_rounds maps each peer to the rounds (one per b-bit segment) in
    which the shared edge is active; segment s holding value g activates
    round s * 2**b + g.
    """

    epoch_id: int
    b: int
    segments: int
    width: int  # rounds per epoch
    peer_rounds: dict[PartyId, tuple[int, ...]]
    _round_peers: dict[int, tuple[PartyId, ...]] = field(default_factory=dict, repr=False)

    def peers_in_round(self, round_index: int) -> tuple[PartyId, ...]:
        if not 0 <= round_index < self.width:
            raise ValueError(f"round {round_index} outside epoch of {self.width} rounds")
        hit = self._round_peers.get(round_index)
        if hit is None:
            hit = tuple(
                peer
                for peer, rounds in self.peer_rounds.items()
                if round_index in rounds
            )
            self._round_peers[round_index] = hit
        return hit

    def active_in_round(self, peer: PartyId, round_index: int) -> bool:
        rounds = self.peer_rounds.get(peer)
        return rounds is not None and round_index in rounds


def plan_epoch(
    secrets: PairwiseSecrets,
    epoch_id: int,
    b: int,
    *,
    prf: Prf = DEFAULT_PRF,
    counters: Optional[Counters] = None,
) -> EpochPlan:
    """Derive the epoch's round assignments: one PRF call per peer.

    The 128-bit output for a peer is cut into floor(128/b) segments of b
    bits each (leftover low bits unused); both endpoints derive the same
    segments from the shared secret, so the graphs agree globally.
    """
    if not 1 <= b <= 128:
        raise ValueError(f"segment width must be in [1, 128], got {b}")
    segments = 128 // b
    width = segments << b
    msg = prf_input(DOMAIN_GRAPH, 0, epoch_id)
    seg_mask = (1 << b) - 1
    peer_rounds: dict[PartyId, tuple[int, ...]] = {}
    n = 0
    for peer, secret, _ in secrets.iter_signed():
        out = prf.evaluate(secret, msg)
        n += 1
        rounds = tuple(
            (s << b) | ((out >> (128 - (s + 1) * b)) & seg_mask)
            for s in range(segments)
        )
        peer_rounds[peer] = rounds
    if counters is not None:
        counters.prf_calls += n
    return EpochPlan(
        epoch_id=epoch_id, b=b, segments=segments, width=width, peer_rounds=peer_rounds
    )


def _zeph_mask_msg(epoch_id: int, round_index: int, block: int = 0) -> bytes:
    if epoch_id >> 40:
        raise ValueError("epoch id exceeds 40 bits")
    if block >> 16:
        raise ValueError("mask block index exceeds 16 bits")
    return prf_input(DOMAIN_MASK, (epoch_id << 16) | block, round_index)


def nonce_zeph(
    plan: EpochPlan,
    secrets: PairwiseSecrets,
    round_index: int,
    *,
    prf: Prf = DEFAULT_PRF,
    modulus: int = MODULUS_DEFAULT,
    counters: Optional[Counters] = None,
    members=None,
) -> int:
    """Round nonce over the epoch plan's active edges: deg(r) PRF calls.

    An empty active set leaves the token unmasked by this party; that is a
    connectivity failure of the round graph, logged as such, and the
    parameter optimizer exists to make it vanishingly rare.
    """
    mask = check_modulus(modulus)
    peers = plan.peers_in_round(round_index)
    msg = _zeph_mask_msg(plan.epoch_id, round_index)
    evaluate = prf.evaluate
    acc = 0
    n = 0
    for peer in peers:
        if members is not None and peer not in members:
            continue
        v = evaluate(secrets.secret_for(peer), msg) & mask
        acc = acc + v if secrets.sign_for(peer) > 0 else acc - v
        n += 1
    if counters is not None:
        counters.prf_calls += n
        counters.additions += n
    if n == 0:
        logger.warning(
            "round %d of epoch %d has no active peers for %r; nonce is zero and "
            "this party's token is unprotected against a curious server",
            round_index,
            plan.epoch_id,
            secrets.self_id,
        )
    return acc & mask


@dataclass(frozen=True)
class MembershipDelta:
    """Round-scoped membership change broadcast by the coordinator."""

    round_index: int
    joined: frozenset
    dropped: frozenset

    def __post_init__(self):
        if self.joined & self.dropped:
            raise ValueError("a party cannot both join and drop in one delta")

    def wire_size(self) -> int:
        return 16 + 32 * (len(self.joined) + len(self.dropped))


def apply_delta(
    plan: EpochPlan,
    secrets: PairwiseSecrets,
    base_nonce: int,
    delta: MembershipDelta,
    round_index: int,
    *,
    prf: Prf = DEFAULT_PRF,
    modulus: int = MODULUS_DEFAULT,
    counters: Optional[Counters] = None,
) -> int:
    """Correct a round nonce for late membership changes.

    Cost is linear in the delta: each listed party is checked against the
    plan, and only parties whose edge is active in this round cost a PRF
    call. Dropped parties' masks are backed out, rejoining parties' masks
    are restored from the existing pairwise secrets.
    """
    mask = check_modulus(modulus)
    msg = _zeph_mask_msg(plan.epoch_id, round_index)
    acc = base_nonce
    touched = 0
    checked = 0
    for group, direction in ((delta.dropped, -1), (delta.joined, 1)):
        for peer in group:
            if peer == secrets.self_id:
                continue
            checked += 1
            if not plan.active_in_round(peer, round_index):
                continue
            v = prf.evaluate(secrets.secret_for(peer), msg) & mask
            signed = v if secrets.sign_for(peer) > 0 else -v
            acc = acc + direction * signed
            touched += 1
    if counters is not None:
        counters.prf_calls += touched
        counters.additions += touched
        counters.edge_checks += checked
    return acc & mask


def mask_vector(
    secrets: PairwiseSecrets,
    peers: Sequence[PartyId],
    width: int,
    *,
    epoch_id: int = 0,
    round_index: int,
    domain: int = DOMAIN_MASK,
    prf: Prf = DEFAULT_PRF,
    modulus: int = MODULUS_DEFAULT,
    counters: Optional[Counters] = None,
) -> np.ndarray:
    """Element-wise nonce vector for tokens wider than one ring element.

    Each 128-bit PRF output covers two 64-bit lanes, so an edge costs
    ceil(width/2) PRF blocks. Peers must already be filtered to the round's
    active membership.
    """
    mask = np.uint64(check_modulus(modulus))
    blocks = (width + 1) // 2
    msgs = np.empty((blocks, 2), dtype=">u8")
    if domain == DOMAIN_MASK:
        if epoch_id >> 40:
            raise ValueError("epoch id exceeds 40 bits")
        msgs[:, 0] = (DOMAIN_MASK << 56) | (epoch_id << 16) | np.arange(blocks, dtype=np.uint64)
    elif domain == DOMAIN_EDGE:
        msgs[:, 0] = (DOMAIN_EDGE << 56) + np.arange(blocks, dtype=np.uint64)
    else:
        raise ValueError(f"unsupported mask domain {domain}")
    msgs[:, 1] = round_index
    buf = msgs.tobytes()
    acc = np.zeros(width, dtype=np.uint64)
    n = 0
    for peer in peers:
        out = prf.evaluate_batch(secrets.secret_for(peer), buf)
        lanes = np.frombuffer(out, dtype=">u8").reshape(-1).astype(np.uint64)[:width]
        lanes &= mask
        if secrets.sign_for(peer) > 0:
            acc = (acc + lanes) & mask
        else:
            acc = (acc - lanes) & mask
        n += 1
    if counters is not None:
        counters.prf_calls += blocks * n
        counters.additions += width * n
    return acc


@dataclass(frozen=True)
class MaskedToken:
    """A party's blinded partial token for one aggregation round."""

    round_index: int
    epoch_id: int
    party: PartyId
    payload: TransformationToken

    def wire_size(self) -> int:
        return 48 + self.payload.wire_size()

    def serialize(self) -> bytes:
        import struct as _struct

        return (
            _struct.pack("<QQ", self.round_index, self.epoch_id)
            + self.party.value
            + serialize_token(self.payload)
        )


def mask_token(
    token: TransformationToken,
    nonces: Union[Mapping[int, int], Sequence[int]],
    *,
    round_index: int,
    epoch_id: int,
    party: PartyId,
    modulus: int = MODULUS_DEFAULT,
) -> MaskedToken:
    """Blind each released element with its nonce lane.

    nonces may be a mapping keyed by element index or a sequence aligned
    with the token's ascending index order.
    """
    mask = check_modulus(modulus)
    indices = token.indices
    if not isinstance(nonces, Mapping):
        if len(nonces) != len(indices):
            raise ValueError(
                f"nonce vector length {len(nonces)} != released elements {len(indices)}"
            )
        nonces = dict(zip(indices, (int(v) for v in nonces)))
    elements = {}
    for i in indices:
        elements[i] = (token.elements[i] + nonces[i]) & mask
    blinded = TransformationToken(
        window_start=token.window_start,
        window_end=token.window_end,
        stream_set_id=token.stream_set_id,
        elements=elements,
        noised=token.noised,
        stream_ids=token.stream_ids,
    )
    return MaskedToken(round_index=round_index, epoch_id=epoch_id, party=party, payload=blinded)


def unmask_aggregate(
    masked: Sequence[MaskedToken],
    *,
    modulus: int = MODULUS_DEFAULT,
    stream_ids: Optional[Iterable[str]] = None,
) -> TransformationToken:
    """Sum the blinded partial tokens of one round.

    When every participant of the round contributed, the pairwise masks
    pair off and the result is the exact element-wise sum of the partial
    tokens, keyed to the union of their stream sets. Nothing here can
    detect a missing party; the output is then uniformly garbled, which is
    the protocol's privacy backstop.
    """
    mask = check_modulus(modulus)
    if not masked:
        raise ValueError("need at least one masked token")
    first = masked[0]
    window = (first.payload.window_start, first.payload.window_end)
    indices = first.payload.indices
    seen_parties = set()
    acc = {i: 0 for i in indices}
    ids: list[str] = []
    have_ids = True
    noised = False
    for m in masked:
        if (m.round_index, m.epoch_id) != (first.round_index, first.epoch_id):
            raise ValueError("masked tokens come from different rounds")
        if (m.payload.window_start, m.payload.window_end) != window:
            raise ValueError("masked tokens target different windows")
        if m.payload.indices != indices:
            raise ValueError("masked tokens release different element patterns")
        if m.party in seen_parties:
            raise ValueError(f"duplicate masked token from {m.party!r}")
        seen_parties.add(m.party)
        noised = noised or m.payload.noised
        if m.payload.stream_ids is None:
            have_ids = False
        else:
            ids.extend(m.payload.stream_ids)
        for i in indices:
            acc[i] = (acc[i] + m.payload.elements[i]) & mask
    if stream_ids is not None:
        ids = list(stream_ids)
    elif not have_ids:
        raise ValueError("stream ids unavailable; pass stream_ids explicitly")
    return TransformationToken(
        window_start=window[0],
        window_end=window[1],
        stream_set_id=stream_set_hash(ids),
        elements=acc,
        noised=noised,
        stream_ids=tuple(sorted(ids)),
    )


# ---- connectivity analysis and parameter choice ---------------------------


def _log_disconnect_bound(n: int, p: float, rounds: int) -> float:
    """Natural log of the union bound on any of `rounds` G(n, p) graphs
    being disconnected. May exceed 0 (a vacuous bound)."""
    if n < 2:
        raise ValueError(f"need at least two honest parties, got {n}")
    if not 0 <= p <= 1:
        raise ValueError(f"edge probability must be in [0, 1], got {p}")
    if rounds < 1:
        raise ValueError(f"rounds must be positive, got {rounds}")
    if p == 1.0:
        return -math.inf
    if p == 0.0:
        return math.inf
    j = np.arange(1, n // 2 + 1, dtype=np.float64)
    # term_j = ((e*n/j) * (1-p)^(n-j))^j, evaluated in log space
    logs = j * (1.0 + math.log(n) - np.log(j) + (n - j) * math.log1p(-p))
    m = float(logs.max())
    return math.log(rounds) + m + math.log(float(np.exp(logs - m).sum()))


def disconnect_bound(n: int, p: float, rounds: int = 1) -> float:
    """Upper bound on the probability that any of `rounds` independent
    G(n, p) graphs is disconnected, clamped to [0, 1] for reporting.

    The per-graph bound sums, over component sizes j up to n/2, the terms
    ((e*n/j) * (1-p)^(n-j))^j; the rounds multiply in by a union bound.
    Evaluation stays in log space so large n and extreme p are exact.
    """
    lb = _log_disconnect_bound(n, p, rounds)
    if lb >= 0:
        return 1.0
    return math.exp(lb)


@dataclass(frozen=True)
class OptimizationResult:
    """Outcome of the epoch parameter search."""

    feasible: bool
    parties: int
    honest_count: int
    failure_budget: float
    b: Optional[int] = None
    rounds: Optional[int] = None
    edge_probability: Optional[float] = None
    expected_degree: Optional[float] = None
    bound: Optional[float] = None


def optimize_b(
    parties: int,
    colluding_fraction: float,
    failure_budget: float,
    *,
    prf_bits: int = 128,
) -> OptimizationResult:
    """Choose the segment width b maximizing rounds per epoch.

    With b-bit segments an epoch spans floor(prf_bits/b) * 2^b rounds and
    each edge is active with per-round probability 2^-b. Feasibility
    requires the union disconnect bound over the whole epoch, restricted
    to the honest parties (the ceil((1-colluding_fraction) * N) survivors
    of the worst tolerated collusion), to stay within the failure budget.
    Ties on rounds prefer the denser graph.
    """
    if parties < 2:
        raise ValueError(f"need at least two parties, got {parties}")
    if not 0 <= colluding_fraction < 1:
        raise ValueError(f"colluding fraction must be in [0, 1), got {colluding_fraction}")
    if not 0 < failure_budget < 1:
        raise ValueError(f"failure budget must be in (0, 1), got {failure_budget}")
    honest = math.ceil((1.0 - colluding_fraction) * parties)
    base = OptimizationResult(
        feasible=False,
        parties=parties,
        honest_count=honest,
        failure_budget=failure_budget,
    )
    if honest < 2:
        return base
    log_budget = math.log(failure_budget)
    best: Optional[tuple[int, int]] = None  # (rounds, b)
    for b in range(1, prf_bits + 1):
        rounds = (prf_bits // b) << b
        if best is not None and rounds <= best[0]:
            continue
        if _log_disconnect_bound(honest, 2.0 ** -b, rounds) <= log_budget:
            best = (rounds, b)
    if best is None:
        return base
    rounds, b = best
    p = 2.0 ** -b
    return OptimizationResult(
        feasible=True,
        parties=parties,
        honest_count=honest,
        failure_budget=failure_budget,
        b=b,
        rounds=rounds,
        edge_probability=p,
        expected_degree=(parties - 1) * p,
        bound=disconnect_bound(honest, p, rounds),
    )


# ---- single-party cost benchmark -------------------------------------------


@dataclass(frozen=True)
class RoundCost:
    """One round of a single party's accounting in the cost benchmark."""

    round_index: int
    active_peers: int
    degree: int
    prf_calls: int
    additions: int


def simulate_party_counters(
    parties: int,
    rounds: int,
    protocol: str,
    *,
    b: Optional[int] = None,
    dropout: float = 0.0,
    seed: int = 0,
    colluding_fraction: float = 0.5,
    failure_budget: float = 1e-7,
) -> list[RoundCost]:
    """Tally one party's per-round protocol costs at population scale.

    Simulates a single party among `parties` across `rounds` rounds and
    counts, per round, the PRF evaluations and ring additions the variant
    requires for a one-element token:

        clique  one mask call and one addition per live peer
        dream   one selection draw per live peer, plus one mask call and
                one addition per selected edge
        zeph    one planning call per peer at each epoch boundary, then
                one mask call and one addition per scheduled live edge

    Peer selection runs through the real planning and selection code paths
    with the benchmark mixing stub standing in for the PRF; mask calls are
    tallied at one per edge, the per-edge cost `mask_vector` pays for a
    scalar token. `dropout` removes each peer independently per round.
    When `b` is omitted the epoch parameters (and the dream edge
    probability, 2**-b) come from `optimize_b`. Deterministic given
    `seed`.
    """
    if parties < 2:
        raise ValueError(f"need at least two parties, got {parties}")
    if rounds < 1:
        raise ValueError(f"rounds must be positive, got {rounds}")
    if not 0 <= dropout < 1:
        raise ValueError(f"dropout must be in [0, 1), got {dropout}")
    if protocol not in ("clique", "dream", "zeph"):
        raise ValueError(f"unknown protocol {protocol!r}")
    peers = parties - 1
    rng = np.random.default_rng(
        np.random.SeedSequence([seed & ((1 << 64) - 1), parties, rounds, len(protocol)])
    )

    if protocol == "clique":
        out = []
        for r in range(rounds):
            alive = int(rng.binomial(peers, 1.0 - dropout)) if dropout else peers
            out.append(RoundCost(r, alive, alive, alive, alive))
        return out

    if b is None:
        opt = optimize_b(parties, colluding_fraction, failure_budget)
        if not opt.feasible:
            raise ValueError(
                f"no feasible epoch parameters for {parties} parties at "
                f"failure budget {failure_budget}"
            )
        b = opt.b
    if not 1 <= b <= 128:
        raise ValueError(f"segment width must be in [1, 128], got {b}")

    prf = SplitMixPrf()
    tag = seed.to_bytes(8, "little", signed=True)
    secrets = [
        hashlib.sha256(b"bench-secret\x00" + tag + i.to_bytes(8, "little")).digest()[:16]
        for i in range(peers)
    ]

    if protocol == "dream":
        threshold = threshold_for_probability(2.0 ** -b)
        thr_hi = np.uint64(threshold >> 64)
        thr_lo = np.uint64(threshold & ((1 << 64) - 1))
        seeds = np.array([prf.seed_of(s) for s in secrets], dtype=np.uint64)
        out = []
        for r in range(rounds):
            hi, lo = SplitMixPrf.evaluate_seeds(seeds, prf_input(DOMAIN_SELECT, 0, r))
            selected = (hi < thr_hi) | ((hi == thr_hi) & (lo <= thr_lo))
            if dropout:
                alive_mask = rng.random(peers) >= dropout
                selected = selected & alive_mask
                alive = int(alive_mask.sum())
            else:
                alive = peers
            degree = int(selected.sum())
            out.append(RoundCost(r, alive, degree, alive + degree, degree))
        return out

    # zeph: replay the epoch planner, then walk its round schedule
    ids = [PartyId(i.to_bytes(32, "big")) for i in range(1, parties)]
    pairwise = PairwiseSecrets(
        PartyId(bytes(32)), dict(zip(ids, secrets, strict=True))
    )
    counters = Counters()
    width = (128 // b) << b
    degree_hist = np.zeros(width, dtype=np.int64)
    out = []
    for r in range(rounds):
        rel = r % width
        if rel == 0:
            before = counters.prf_calls
            plan = plan_epoch(pairwise, r // width, b, prf=prf, counters=counters)
            setup_calls = counters.prf_calls - before
            degree_hist[:] = 0
            scheduled = np.fromiter(
                (rr for rs in plan.peer_rounds.values() for rr in set(rs)),
                dtype=np.int64,
            )
            degree_hist += np.bincount(scheduled, minlength=width)
        else:
            setup_calls = 0
        planned = int(degree_hist[rel])
        degree = int(rng.binomial(planned, 1.0 - dropout)) if dropout else planned
        out.append(RoundCost(r, degree, degree, setup_calls + degree, degree))
    return out
