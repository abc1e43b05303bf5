"""Schema parsing, query planning, reservations, and controller verification."""

import dataclasses
import hashlib

import pytest

from veilstream.policy import (
    DpRequest,
    Predicate,
    PrivacyOption,
    Query,
    Rejection,
    ReservationLedger,
    SelectItem,
    StreamAnnotation,
    TransformationPlan,
    parse_query,
    parse_schema,
    plan_query,
    release_reservation,
    verify_plan,
)
from veilstream.secure_agg import IdentityRegistry, PartyId, PublicIdentity
from veilstream.tokens import output_layout

SCHEMA = parse_schema(
    {
        "name": "wearable",
        "metadata": [
            {"name": "region", "type": "string"},
            {"name": "year", "type": "int"},
        ],
        "attributes": [
            {
                "name": "heart_rate",
                "aggregates": ["sum", "count", "avg", "var"],
                "options": [
                    {"kind": "aggregate", "min_population": 3},
                    {"kind": "stream-aggregate", "min_window": 4},
                    {"kind": "private"},
                ],
            },
            {
                "name": "steps",
                "aggregates": ["sum"],
                "options": [
                    {"kind": "aggregate"},
                    {"kind": "dp-aggregate", "epsilon": 1.0},
                ],
            },
            {
                "name": "altitude",
                "aggregates": ["histogram", "median", "mode"],
                "bins": {"min": 0, "max": 100, "width": 5},
                "options": [{"kind": "aggregate", "max_resolution": 10}],
            },
        ],
    }
)

DEFAULT_SELECTED = {
    "heart_rate": "aggregate",
    "steps": "aggregate",
    "altitude": "aggregate",
}


def owner(k: int) -> bytes:
    return hashlib.sha256(f"owner-{k}".encode()).digest()


def annotation(i, selected=None, metadata=None, owner_index=None):
    return StreamAnnotation(
        stream_id=f"stream-{i:03d}",
        schema_name="wearable",
        owner_id=owner(i if owner_index is None else owner_index),
        selected=dict(DEFAULT_SELECTED if selected is None else selected),
        metadata={"region": "eu", "year": 2024, **(metadata or {})},
    )


def avg_query(**kwargs):
    defaults = dict(
        name="hr-avg",
        select=(SelectItem("hr_avg", "heart_rate", "avg"),),
        window=6,
    )
    defaults.update(kwargs)
    return Query(**defaults)


# ---- schema parsing ------------------------------------------------------------


def test_schema_widths_and_slices():
    assert SCHEMA.width == 3 + 1 + 20
    assert SCHEMA.slices == {
        "heart_rate": (0, 3),
        "steps": (3, 4),
        "altitude": (4, 24),
    }
    assert SCHEMA.attribute("steps").encoding.kind == "sum"
    assert SCHEMA.attribute("heart_rate").encoding.kind == "variance"
    assert SCHEMA.attribute("altitude").encoding.kind == "histogram"
    with pytest.raises(KeyError, match="no attribute"):
        SCHEMA.attribute("cadence")
    with pytest.raises(KeyError, match="offers no"):
        SCHEMA.attribute("altitude").option("public")


def test_schema_parsing_from_yaml_text():
    parsed = parse_schema(
        """
        name: tiny
        attributes:
          - name: visits
            aggregates: [count, avg]
            options: [{kind: aggregate}]
        """
    )
    assert parsed.attribute("visits").encoding.kind == "sum_count"


def test_encoding_inference_for_predicates_and_domains():
    schema = parse_schema(
        {
            "name": "s",
            "attributes": [
                {
                    "name": "load",
                    "aggregates": ["sum_above", "sum_below"],
                    "threshold": 0.8,
                    "options": [{"kind": "aggregate"}],
                },
                {
                    "name": "grade",
                    "aggregates": ["mode"],
                    "domain": {"min": 1, "max": 6},
                    "options": [{"kind": "aggregate"}],
                },
            ],
        }
    )
    assert schema.attribute("load").encoding.kind == "predicate_threshold"
    assert schema.attribute("load").encoding.threshold == 0.8
    assert schema.attribute("grade").encoding.kind == "one_hot"
    assert schema.attribute("grade").encoding.width == 6


def test_schema_parsing_rejects_malformed_documents():
    with pytest.raises(ValueError, match="mapping"):
        parse_schema("just a string")
    with pytest.raises(ValueError, match="needs a name"):
        parse_schema({"attributes": [{}]})
    with pytest.raises(ValueError, match="no stream attributes"):
        parse_schema({"name": "x"})
    base = {"name": "x", "attributes": [{"name": "a", "aggregates": ["sum"]}]}
    with pytest.raises(ValueError, match="no privacy options"):
        parse_schema(base)
    with pytest.raises(ValueError, match="duplicate attribute"):
        parse_schema(
            {
                "name": "x",
                "attributes": [
                    {"name": "a", "aggregates": ["sum"], "options": [{"kind": "aggregate"}]},
                    {"name": "a", "aggregates": ["sum"], "options": [{"kind": "aggregate"}]},
                ],
            }
        )
    with pytest.raises(ValueError, match="unknown aggregate"):
        parse_schema(
            {
                "name": "x",
                "attributes": [
                    {"name": "a", "aggregates": ["mean"], "options": [{"kind": "aggregate"}]}
                ],
            }
        )
    with pytest.raises(ValueError, match="'bins' or 'domain'"):
        parse_schema(
            {
                "name": "x",
                "attributes": [
                    {"name": "a", "aggregates": ["median"], "options": [{"kind": "aggregate"}]}
                ],
            }
        )
    with pytest.raises(ValueError, match="need 'threshold'"):
        parse_schema(
            {
                "name": "x",
                "attributes": [
                    {"name": "a", "aggregates": ["sum_above"], "options": [{"kind": "aggregate"}]}
                ],
            }
        )
    with pytest.raises(ValueError, match="unknown type"):
        parse_schema(
            {
                "name": "x",
                "metadata": [{"name": "m", "type": "blob"}],
                "attributes": [
                    {"name": "a", "aggregates": ["sum"], "options": [{"kind": "aggregate"}]}
                ],
            }
        )


def test_privacy_option_validation():
    with pytest.raises(ValueError, match="unknown privacy option"):
        PrivacyOption("secret")
    with pytest.raises(ValueError, match="min_population"):
        PrivacyOption("aggregate", min_population=0)
    with pytest.raises(ValueError, match="epsilon_budget"):
        PrivacyOption("dp-aggregate")
    with pytest.raises(ValueError, match="max_resolution"):
        PrivacyOption("aggregate", max_resolution=0)


# ---- query parsing -------------------------------------------------------------


def test_query_parsing_from_yaml():
    query = parse_query(
        """
        name: demo
        window: 12
        max_population: 40
        select:
          hist: {attribute: altitude, function: median, bucket_width: 10}
          hr: {attribute: heart_rate, function: avg}
        where:
          - {attribute: region, equals: eu}
          - {attribute: year, between: [2020, 2025]}
        dp: {epsilon: 0.5, sigma: 20}
        """
    )
    assert query.window == 12
    assert {s.output_name for s in query.select} == {"hist", "hr"}
    assert query.where[0].op == "eq" and query.where[1].op == "range"
    assert query.dp == DpRequest(epsilon_cost=0.5, sigma_target=20)
    with pytest.raises(ValueError, match="'equals' or 'between'"):
        parse_query({"window": 5, "select": {"x": {"attribute": "a", "function": "sum"}},
                     "where": [{"attribute": "a", "above": 3}]})


def test_query_validation():
    with pytest.raises(ValueError, match="selects nothing"):
        Query(name="q", select=(), window=5)
    with pytest.raises(ValueError, match="positive window"):
        avg_query(window=0)
    with pytest.raises(ValueError, match="max_population"):
        avg_query(max_population=0)
    with pytest.raises(ValueError, match="unknown aggregate function"):
        SelectItem("x", "heart_rate", "harmonic_mean")
    with pytest.raises(ValueError, match="epsilon_cost"):
        DpRequest(epsilon_cost=0, sigma_target=1)


def test_predicate_matching():
    a = annotation(1, metadata={"year": 2023})
    assert Predicate("region", "eq", value="eu").matches(a)
    assert not Predicate("region", "eq", value="us").matches(a)
    assert Predicate("year", "range", low=2020, high=2024).matches(a)
    assert not Predicate("missing", "eq", value=1).matches(a)
    assert Predicate("stream_id", "eq", value="stream-001").matches(a)
    # range over a non-numeric subject is just a non-match
    assert not Predicate("region", "range", low=0, high=9).matches(a)
    with pytest.raises(ValueError, match="low and high"):
        Predicate("year", "range", low=3)


# ---- planning: happy paths ------------------------------------------------------


def test_plan_for_population_average():
    ledger = ReservationLedger()
    annotations = [annotation(i) for i in range(5)]
    plan = plan_query(avg_query(), SCHEMA, annotations, ledger)
    assert isinstance(plan, TransformationPlan)
    assert plan.members == tuple(sorted(a.stream_id for a in annotations))
    assert plan.chain == ("window_aggregate", "cross_stream_sum")
    # avg over a variance encoding releases the sum and count elements
    released = [j for j, d in enumerate(plan.directives) if d.action != "withhold"]
    assert released == [0, 2]
    assert plan.layout == ((0,), (2,))
    (out,) = plan.outputs
    assert (out.out_start, out.out_stop) == (0, 2)
    assert out.decode.kind == "sum_count"
    assert plan.output_width == 2
    assert plan.queried_attributes() == ("heart_rate",)
    # reservations were taken atomically for every (member, attribute) pair
    for m in plan.members:
        assert ledger.exclusive_holder((m, "heart_rate")) == plan.plan_id


def test_output_offsets_follow_element_order_not_select_order():
    ledger = ReservationLedger()
    annotations = [annotation(i) for i in range(4)]
    query = Query(
        name="two",
        select=(
            SelectItem("step_sum", "steps", "sum"),
            SelectItem("hr_avg", "heart_rate", "avg"),
        ),
        window=6,
    )
    plan = plan_query(query, SCHEMA, annotations, ledger)
    by_name = {o.name: o for o in plan.outputs}
    # heart_rate occupies elements 0..2, steps element 3: the released wire
    # order puts heart rate first even though the query listed steps first
    assert (by_name["hr_avg"].out_start, by_name["hr_avg"].out_stop) == (0, 2)
    assert (by_name["step_sum"].out_start, by_name["step_sum"].out_stop) == (2, 3)
    assert [o.name for o in plan.outputs] == ["step_sum", "hr_avg"]
    assert plan.layout == ((0,), (2,), (3,))


def test_bucketed_histogram_merges_bins():
    ledger = ReservationLedger()
    annotations = [annotation(i) for i in range(3)]
    query = Query(
        name="alt",
        select=(SelectItem("alt_med", "altitude", "median", bucket_width=10),),
        window=6,
    )
    plan = plan_query(query, SCHEMA, annotations, ledger)
    alt_start = SCHEMA.slices["altitude"][0]
    assert all(
        plan.directives[alt_start + j].action == "merge" for j in range(20)
    )
    assert plan.output_width == 10  # 20 bins of 5 fused pairwise
    (out,) = plan.outputs
    assert out.decode.bin_width == 10
    assert out.decode.domain_min == 0 and out.decode.domain_max == 100
    assert plan.layout == output_layout(plan.directives)


def test_single_stream_plan_when_option_allows():
    ledger = ReservationLedger()
    mates = [
        annotation(0, selected={"heart_rate": "stream-aggregate"}),
        annotation(1, selected={"heart_rate": "private"}),
    ]
    plan = plan_query(avg_query(), SCHEMA, mates, ledger)
    assert isinstance(plan, TransformationPlan)
    assert plan.members == ("stream-000",)
    assert plan.chain == ("window_aggregate",)


def test_population_capping_is_deterministic():
    ledger = ReservationLedger()
    annotations = [annotation(i) for i in range(10)]
    plan = plan_query(avg_query(max_population=4), SCHEMA, annotations, ledger)
    ranked = sorted(
        (a.stream_id for a in annotations),
        key=lambda s: hashlib.sha256(b"member-order\x00" + s.encode()).digest(),
    )
    assert set(plan.members) == set(ranked[:4])
    assert len(plan.members) == 4


def test_max_dropouts_respects_population_floor():
    ledger = ReservationLedger()
    plan = plan_query(avg_query(), SCHEMA, [annotation(i) for i in range(10)], ledger)
    # 10 members, min_population 3 -> 10% dropout allowance fits
    assert plan.max_dropouts == 1
    assert plan.min_members == 9

    ledger2 = ReservationLedger()
    plan2 = plan_query(avg_query(), SCHEMA, [annotation(i) for i in range(3)], ledger2)
    assert plan2.max_dropouts == 0  # dropping anyone would break min_population


def test_dp_plan_builds_noise_spec():
    ledger = ReservationLedger()
    annotations = [
        annotation(i, selected={"steps": "dp-aggregate"}) for i in range(6)
    ]
    query = Query(
        name="dp-steps",
        select=(SelectItem("s", "steps", "sum"),),
        window=6,
        dp=DpRequest(epsilon_cost=0.4, sigma_target=30.0),
    )
    plan = plan_query(query, SCHEMA, annotations, ledger, colluding_fraction=0.5)
    assert plan.chain == ("window_aggregate", "cross_stream_sum", "dp_noise")
    assert plan.dp_epsilon == 0.4
    assert plan.noise.sigma_target == 30.0
    assert plan.noise.honest_fraction == 0.5
    assert plan.noise.party_count == len(set(plan.owners))


# ---- planning: rejections --------------------------------------------------------


def reject(query, annotations, ledger=None):
    result = plan_query(query, SCHEMA, annotations, ledger or ReservationLedger())
    assert isinstance(result, Rejection)
    return result


def test_rejections_for_malformed_selections():
    anns = [annotation(i) for i in range(3)]
    bad_attr = Query(
        name="q", select=(SelectItem("x", "cadence", "sum"),), window=5
    )
    assert reject(bad_attr, anns).reason == "unknown_attribute"

    bad_fn = Query(name="q", select=(SelectItem("x", "steps", "avg"),), window=5)
    assert reject(bad_fn, anns).reason == "unsupported_function"

    dupe = Query(
        name="q",
        select=(
            SelectItem("a", "steps", "sum"),
            SelectItem("b", "steps", "sum"),
        ),
        window=5,
    )
    assert reject(dupe, anns).reason == "duplicate_attribute"


def test_rejection_when_no_streams_match():
    anns = [annotation(i) for i in range(3)]
    q = avg_query(where=(Predicate("region", "eq", value="mars"),))
    assert reject(q, anns).reason == "no_matching_streams"


def test_rejection_private_selection():
    anns = [annotation(i, selected={"heart_rate": "private"}) for i in range(4)]
    assert reject(avg_query(), anns).reason == "option_forbids"


def test_rejection_option_above_chain_level():
    # producers demand dp for steps, query carries no dp request
    anns = [annotation(i, selected={"steps": "dp-aggregate"}) for i in range(4)]
    q = Query(name="q", select=(SelectItem("s", "steps", "sum"),), window=5)
    assert reject(q, anns).reason == "option_forbids"


def test_rejection_option_not_offered():
    anns = [annotation(i, selected={"steps": "stream-aggregate"}) for i in range(3)]
    q = Query(name="q", select=(SelectItem("s", "steps", "sum"),), window=5)
    assert reject(q, anns).reason == "option_not_offered"


def test_rejection_no_option_selected():
    anns = [annotation(i, selected={"steps": "aggregate"}) for i in range(3)]
    assert reject(avg_query(), anns).reason == "no_option_selected"


def test_rejection_min_window():
    anns = [annotation(i, selected={"heart_rate": "stream-aggregate"}) for i in range(3)]
    assert reject(avg_query(window=2), anns).reason == "min_window"


def test_rejection_min_population():
    anns = [annotation(i) for i in range(2)]  # heart_rate aggregate wants >= 3
    assert reject(avg_query(), anns).reason == "min_population"


def test_rejection_single_stream_aggregate_demand():
    anns = [annotation(0, selected={"steps": "aggregate"})]
    q = Query(name="q", select=(SelectItem("s", "steps", "sum"),), window=5)
    assert reject(q, anns).reason == "option_forbids"


def test_rejection_resolution_floor():
    anns = [annotation(i) for i in range(3)]
    fine = Query(
        name="q", select=(SelectItem("a", "altitude", "median"),), window=5
    )
    # native bins are 5 wide, the option demands at least 10
    assert reject(fine, anns).reason == "max_resolution"
    ragged = Query(
        name="q",
        select=(SelectItem("a", "altitude", "median", bucket_width=12),),
        window=5,
    )
    assert reject(ragged, anns).reason == "max_resolution"


# ---- reservations and budgets ------------------------------------------------------


def test_exclusive_reservation_blocks_and_releases():
    ledger = ReservationLedger()
    anns = [annotation(i) for i in range(4)]
    plan = plan_query(avg_query(), SCHEMA, anns, ledger)
    assert isinstance(plan, TransformationPlan)
    again = plan_query(avg_query(), SCHEMA, anns, ledger)
    assert isinstance(again, Rejection) and again.reason == "reserved"
    release_reservation(ledger, plan.plan_id)
    third = plan_query(avg_query(), SCHEMA, anns, ledger)
    assert isinstance(third, TransformationPlan)


def test_ledger_reservation_is_all_or_nothing():
    ledger = ReservationLedger()
    assert ledger.try_reserve_exclusive("p1", [("s1", "a"), ("s2", "a")])
    assert not ledger.try_reserve_exclusive("p2", [("s3", "a"), ("s1", "a")])
    assert ledger.exclusive_holder(("s3", "a")) is None  # nothing partial
    ledger.release("p1")
    ledger.release("p1")  # idempotent
    assert not ledger.is_blocked(("s1", "a"))


def test_dp_budget_draws_down_and_exhausts():
    ledger = ReservationLedger()
    anns = [annotation(i, selected={"steps": "dp-aggregate"}) for i in range(5)]

    def dp_query(name):
        return Query(
            name=name,
            select=(SelectItem("s", "steps", "sum"),),
            window=5,
            dp=DpRequest(epsilon_cost=0.4, sigma_target=5.0),
        )

    first = plan_query(dp_query("q1"), SCHEMA, anns, ledger)
    second = plan_query(dp_query("q2"), SCHEMA, anns, ledger)
    assert isinstance(first, TransformationPlan)
    assert isinstance(second, TransformationPlan)
    assert first.plan_id != second.plan_id  # overlapping DP plans coexist
    third = plan_query(dp_query("q3"), SCHEMA, anns, ledger)
    assert isinstance(third, Rejection) and third.reason == "epsilon_budget"
    # releasing plans does not refund spent epsilon
    release_reservation(ledger, first.plan_id)
    release_reservation(ledger, second.plan_id)
    fourth = plan_query(dp_query("q4"), SCHEMA, anns, ledger)
    assert isinstance(fourth, Rejection) and fourth.reason == "epsilon_budget"
    assert ledger.dp_spent(("stream-000", "steps")) == pytest.approx(0.8)


def test_dp_and_exclusive_plans_conflict():
    ledger = ReservationLedger()
    anns = [
        annotation(i, selected={"steps": "aggregate", "heart_rate": "aggregate"})
        for i in range(4)
    ]
    plain = Query(name="plain", select=(SelectItem("s", "steps", "sum"),), window=5)
    dpq = Query(
        name="dp",
        select=(SelectItem("s", "steps", "sum"),),
        window=5,
        dp=DpRequest(epsilon_cost=0.1, sigma_target=5.0),
    )
    held = plan_query(plain, SCHEMA, anns, ledger)
    assert isinstance(held, TransformationPlan)
    blocked = plan_query(dpq, SCHEMA, anns, ledger)
    assert isinstance(blocked, Rejection) and blocked.reason == "reserved"
    release_reservation(ledger, held.plan_id)
    dp_plan = plan_query(dpq, SCHEMA, anns, ledger)
    assert isinstance(dp_plan, TransformationPlan)
    # the live DP activity now blocks a fresh exclusive hold
    blocked2 = plan_query(plain, SCHEMA, anns, ledger)
    assert isinstance(blocked2, Rejection) and blocked2.reason == "reserved"


# ---- controller-side verification -----------------------------------------------------


def controllers_for(annotations):
    """Group annotations per owning controller."""
    mine = {}
    for a in annotations:
        mine.setdefault(a.owner_id, {})[a.stream_id] = a
    return mine


def test_every_member_controller_accepts_planner_output():
    ledger = ReservationLedger()
    anns = [annotation(i) for i in range(5)]
    plan = plan_query(avg_query(), SCHEMA, anns, ledger)
    for own in controllers_for(anns).values():
        assert verify_plan(plan, SCHEMA, own).ok


def test_verify_rejects_structural_tampering():
    ledger = ReservationLedger()
    anns = [annotation(i) for i in range(5)]
    plan = plan_query(avg_query(), SCHEMA, anns, ledger)
    own = {a.stream_id: a for a in anns}

    bad_layout = dataclasses.replace(plan, layout=((0,), (1,)))
    assert verify_plan(bad_layout, SCHEMA, own).reason == "layout_mismatch"

    short = dataclasses.replace(
        plan,
        directives=plan.directives[:-1],
        layout=output_layout(plan.directives[:-1]),
    )
    assert verify_plan(short, SCHEMA, own).reason == "width_mismatch"

    assert verify_plan(
        dataclasses.replace(plan, window=0), SCHEMA, own
    ).reason == "bad_window"

    sneaky_dp = dataclasses.replace(plan, chain=plan.chain + ("dp_noise",))
    assert verify_plan(sneaky_dp, SCHEMA, own).reason == "dp_chain_mismatch"

    solo_chain = dataclasses.replace(plan, chain=("window_aggregate",))
    assert verify_plan(solo_chain, SCHEMA, own).reason == "chain_mismatch"

    stranger = {a.stream_id: a for a in [annotation(77)]}
    assert verify_plan(plan, SCHEMA, stranger).reason == "not_a_member"


def test_verify_rechecks_options_and_constraints():
    ledger = ReservationLedger()
    anns = [annotation(i) for i in range(5)]
    plan = plan_query(avg_query(), SCHEMA, anns, ledger)

    hostile = {
        "stream-000": annotation(0, selected={"heart_rate": "private"})
    }
    assert verify_plan(plan, SCHEMA, hostile).reason == "option_forbids"

    unselected = {"stream-000": annotation(0, selected={"steps": "aggregate"})}
    assert verify_plan(plan, SCHEMA, unselected).reason == "no_option_selected"

    shrunk = dataclasses.replace(plan, members=("stream-000", "stream-001"))
    own = {a.stream_id: a for a in anns}
    assert verify_plan(shrunk, SCHEMA, own).reason == "min_population"

    narrow = dataclasses.replace(plan, window=2)
    windowed = {
        "stream-000": annotation(0, selected={"heart_rate": "stream-aggregate"})
    }
    solo = dataclasses.replace(
        narrow, members=("stream-000",), chain=("window_aggregate",)
    )
    assert verify_plan(solo, SCHEMA, windowed).reason == "min_window"


def test_verify_checks_dp_budgets_and_identities():
    ledger = ReservationLedger()
    anns = [annotation(i, selected={"steps": "dp-aggregate"}) for i in range(4)]
    query = Query(
        name="dp",
        select=(SelectItem("s", "steps", "sum"),),
        window=5,
        dp=DpRequest(epsilon_cost=0.4, sigma_target=5.0),
    )
    plan = plan_query(query, SCHEMA, anns, ledger)
    own = {a.stream_id: a for a in anns}
    assert verify_plan(plan, SCHEMA, own).ok

    # a controller tracking its own remaining budget refuses an overdraft
    spent = {(sid, "steps"): 0.1 for sid in plan.members}
    assert verify_plan(
        plan, SCHEMA, own, remaining_epsilon=spent
    ).reason == "epsilon_budget"

    greedy = dataclasses.replace(plan, dp_epsilon=1.5)
    assert verify_plan(greedy, SCHEMA, own).reason == "epsilon_budget"

    registry = IdentityRegistry()
    assert verify_plan(plan, SCHEMA, own, registry=registry).reason == "unknown_identity"
    for o in plan.owners:
        registry.register(PublicIdentity(PartyId(o), o))
    assert verify_plan(plan, SCHEMA, own, registry=registry).ok


def test_verify_resolution_floor_on_decode_spec():
    ledger = ReservationLedger()
    anns = [annotation(i) for i in range(3)]
    query = Query(
        name="alt",
        select=(SelectItem("a", "altitude", "median", bucket_width=10),),
        window=5,
    )
    plan = plan_query(query, SCHEMA, anns, ledger)
    own = {a.stream_id: a for a in anns}
    assert verify_plan(plan, SCHEMA, own).ok
    fine_decode = dataclasses.replace(
        plan,
        outputs=(
            dataclasses.replace(
                plan.outputs[0],
                decode=dataclasses.replace(plan.outputs[0].decode, bin_width=5.0),
            ),
        ),
    )
    assert verify_plan(fine_decode, SCHEMA, own).reason == "max_resolution"
