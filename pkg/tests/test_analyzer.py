import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cednet_lab.analyzer import (
    AnalysisError,
    AnalysisReport,
    count_flops,
    count_params,
    emit_report,
    fusion_time_ratio,
    receptive_field,
)
from cednet_lab.graph import (
    CEDNET_B,
    CEDNET_S,
    CEDNET_T,
    CONVNEXT_S_FPN,
    STYLES,
    ArchConfig,
    ArchGraph,
    GraphBuilder,
    LayerNode,
    build_cednet,
    build_convnext,
)
from cednet_lab.sweeps import allocation_sweep, stage_sweep

# frozen from the closed-form oracle in tests/oracles.py
GOLDEN_T_RATIO = 0.33970139271626115
GOLDEN_T_CLS_PARAMS = 31_270_408


def shuffled_topological(graph: ArchGraph, seed: int) -> ArchGraph:
    """Same graph, nodes emitted in a random valid topological order."""
    r = random.Random(seed)
    users = {n.id: [] for n in graph.nodes}
    indeg = {n.id: len(n.inputs) for n in graph.nodes}
    for n in graph.nodes:
        for i in n.inputs:
            users[i].append(n.id)
    ready = [n.id for n in graph.nodes if not n.inputs]
    order = []
    while ready:
        nid = ready.pop(r.randrange(len(ready)))
        order.append(nid)
        for u in users[nid]:
            indeg[u] -= 1
            if indeg[u] == 0:
                ready.append(u)
    nodes = tuple(graph.node(i) for i in order)
    return ArchGraph(nodes, graph.input_id, graph.outputs, graph.first_fusion, graph.meta)


class TestParams:
    def test_single_1x1_conv(self):
        b = GraphBuilder(352)
        b.conv(b.input_id, 192, 1)
        total, by_node = count_params(b.finish({}))
        assert total == 352 * 192 + 192 == 67_776
        assert list(by_node.values()) == [67_776]

    @pytest.mark.parametrize("style", STYLES)
    @pytest.mark.parametrize("cfg", [CEDNET_T, CEDNET_S, CEDNET_B])
    def test_matches_closed_form(self, cfg, style):
        g = build_cednet(cfg.replace(style=style))
        assert count_params(g)[0] == oracles.cednet(cfg.channels, cfg.blocks, cfg.stages, style)

    def test_classification_golden(self):
        t = CEDNET_T
        assert count_params(build_cednet(t, "classification"))[0] == GOLDEN_T_CLS_PARAMS
        assert oracles.cednet(t.channels, t.blocks, t.stages, classification=True) == GOLDEN_T_CLS_PARAMS

    def test_by_node_sums(self):
        total, by_node = count_params(build_cednet(CEDNET_T))
        assert sum(by_node.values()) == total

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_invariant_under_topological_reordering(self, seed):
        g = build_cednet(CEDNET_T.replace(stages=2, style="unet"))
        g2 = shuffled_topological(g, seed)
        pos = {n.id: i for i, n in enumerate(g2.nodes)}
        assert all(pos[i] < pos[n.id] for n in g2.nodes for i in n.inputs)
        assert [n.id for n in g2.nodes] != [n.id for n in g.nodes]
        assert count_params(g2)[0] == count_params(g)[0]
        assert count_flops(g2, (64, 64)) == count_flops(g, (64, 64))
        assert fusion_time_ratio(g2) == fusion_time_ratio(g)

    @pytest.mark.parametrize("cfg", [CEDNET_T, CEDNET_S, CEDNET_B])
    def test_lr_overhead_below_two_percent_per_stage(self, cfg):
        with_lr = build_cednet(cfg)
        without = build_cednet(cfg.replace(lr_block=False))
        for i in range(1, cfg.stages + 1):
            p = sum(n.num_params() for n in with_lr.nodes if n.module == f"stage{i}")
            q = sum(n.num_params() for n in without.nodes if n.module == f"stage{i}")
            assert 0 < (p - q) / q < 0.02


class TestFlops:
    def test_single_conv(self):
        b = GraphBuilder(64)
        b.conv(b.input_id, 64, 3, stride=4, padding=1)  # 224 -> 56
        assert count_flops(b.finish({}), (224, 224)) == 64 * 64 * 9 * 56 * 56 == 115_605_504

    def test_linear_and_depthwise(self):
        b = GraphBuilder(8)
        h = b.conv(b.input_id, 8, 7, padding=3, groups=8)
        b.linear(h, 32)
        assert count_flops(b.finish({}), (32, 32)) == 8 * 49 * 32 * 32 + 32 * 32 * 8 * 32

    @pytest.mark.parametrize("cfg", [CEDNET_T, CEDNET_T.replace(style="hourglass"), CONVNEXT_S_FPN])
    def test_scaling_law(self, cfg):
        from cednet_lab.graph import build_graph

        g = build_graph(cfg)
        assert count_flops(g, (256, 512)) == 4 * count_flops(g, (128, 256))

    def test_indivisible(self):
        with pytest.raises(AnalysisError, match="divisible"):
            count_flops(build_cednet(CEDNET_T), (224, 100))

    def test_elementwise_reported_separately(self):
        total, macs, elem = count_flops(build_cednet(CEDNET_T), (224, 224), detail=True)
        assert total == sum(macs.values())
        assert elem["gelu"] > 0 and elem["upsample"] > 0
        assert all(build_cednet(CEDNET_T).node(k).kind in ("conv2d", "linear") for k in macs)


class TestFusionTime:
    def test_cednet_t_golden(self):
        g = build_cednet(CEDNET_T)
        oracle = oracles.cednet_pre_fusion(CEDNET_T.channels, CEDNET_T.blocks) / oracles.cednet(
            CEDNET_T.channels, CEDNET_T.blocks, 3
        )
        assert fusion_time_ratio(g) == pytest.approx(oracle, abs=1e-15)
        assert fusion_time_ratio(g) == pytest.approx(GOLDEN_T_RATIO, abs=1e-15)
        assert 0.30 < GOLDEN_T_RATIO < 0.40

    @pytest.mark.parametrize("style", STYLES)
    def test_all_styles_match_oracle(self, style):
        cfg = CEDNET_T.replace(style=style)
        oracle = oracles.cednet_pre_fusion(cfg.channels, cfg.blocks, style=style) / oracles.cednet(
            cfg.channels, cfg.blocks, 3, style
        )
        assert fusion_time_ratio(build_cednet(cfg)) == pytest.approx(oracle, abs=1e-15)

    def test_convnext_fpn(self):
        assert fusion_time_ratio(build_convnext(CONVNEXT_S_FPN)) == pytest.approx(0.917, abs=0.02)

    def test_no_fusion(self):
        b = GraphBuilder(3)
        h = b.conv(b.input_id, 8, 3, padding=1)
        with pytest.raises(AnalysisError, match="no fusion node"):
            fusion_time_ratio(b.finish({"y": h}))

    def test_fusion_of_stem_taps(self):
        b = GraphBuilder(3)
        a = b.conv(b.input_id, 8, 3, padding=1, name="a")
        d = b.conv(b.input_id, 8, 2, stride=2, name="d")
        fuse = b.add(a, b.upsample(d, 2, "up"), "fuse")
        head = b.conv(fuse, 8, 1, name="head")
        g = b.finish({"y": head})
        assert g.first_fusion == "fuse"
        pre = g.node("a").num_params() + g.node("d").num_params()
        assert fusion_time_ratio(g) == pre / (pre + g.node("head").num_params())

    def test_empty_pre_fusion(self):
        # hand-annotated parameter-free tap at level 1
        nodes = (
            LayerNode("input", "input", (), 4, 0),
            LayerNode("tap", "gelu", ("input",), 4, 1),
            LayerNode("up", "upsample", ("tap",), 4, 0, {"scale": 2}),
            LayerNode("fuse", "add", ("input", "up"), 4, 0),
            LayerNode("head", "conv2d", ("fuse",), 4, 0,
                      {"in_channels": 4, "kernel": 1, "stride": 1, "padding": 0, "dilation": 1, "groups": 1}),
        )
        g = ArchGraph(nodes, "input", {"y": "head"}, "fuse")
        assert fusion_time_ratio(g) == 0.0

    def test_strictly_decreasing_in_m(self):
        ratios = [fusion_time_ratio(build_cednet(c)) for _, c in stage_sweep()]
        assert all(a > b for a, b in zip(ratios, ratios[1:]))

    @pytest.mark.parametrize("style", STYLES)
    def test_decreasing_in_m_fixed_stage(self, style):
        ratios = [fusion_time_ratio(build_cednet(CEDNET_T.replace(stages=m, style=style))) for m in (1, 2, 3, 4)]
        assert all(a > b for a, b in zip(ratios, ratios[1:]))

    def test_allocation_family_monotone(self):
        rows = allocation_sweep()
        ratios = [fusion_time_ratio(build_cednet(c)) for _, c in rows]
        assert [lab for lab, _ in rows] == ["6/6", "5/6", "4/6", "3/6", "2/6", "1/6"]
        assert all(a > b for a, b in zip(ratios, ratios[1:]))

    def test_two_stage_allocations_equal_params(self):
        params = {lab: count_params(build_cednet(c))[0] for lab, c in allocation_sweep() if c.stages == 2}
        assert len(set(params.values())) == 1

    @settings(max_examples=20, deadline=None)
    @given(a=st.integers(1, 5), style=st.sampled_from(STYLES))
    def test_share_property(self, a, style):
        # moving one unit of (1,2,1) from stage 2 to stage 1 raises the ratio
        def ratio(k):
            cfg = CEDNET_T.replace(stages=2, style=style,
                                   per_stage_override=((k, 2 * k, k), (6 - k, 12 - 2 * k, 6 - k)))
            return fusion_time_ratio(build_cednet(cfg))

        if a < 5:
            assert ratio(a + 1) > ratio(a)

    def test_bounds(self):
        for cfg in (CEDNET_T, CEDNET_S, CEDNET_B):
            assert 0.0 <= fusion_time_ratio(build_cednet(cfg)) <= 1.0


def chain_rf(n0, n1, n2, n3, lr, r=3):
    """RF of e32 in a 1-stage CEDNet: sum of (k_eff - 1) * jump along the conv chain."""
    rf, jump = 1, 1
    for k, s, d, reps in [(3, 2, 1, 1), (3, 2, 1, 1), (7, 1, 1, n0), (2, 2, 1, 1), (7, 1, 1, n1), (2, 2, 1, 1),
                          (7, 1, 1, n2), (2, 2, 1, 1)]:
        for _ in range(reps):
            rf += (d * (k - 1) + 1 - 1) * jump
            jump *= s
    for _ in range(n3):
        if lr:
            rf += (r * 6 + 1 - 1) * jump
        rf += 6 * jump
    return rf


class TestReceptiveField:
    def test_single_dw(self):
        b = GraphBuilder(4)
        h = b.conv(b.input_id, 4, 7, padding=3, groups=4)
        assert receptive_field(b.finish({"y": h}), "y") == (7, 7)

    def test_dilated(self):
        b = GraphBuilder(4)
        h = b.conv(b.input_id, 4, 7, padding=9, dilation=3, groups=4)
        assert receptive_field(b.finish({"y": h}), "y") == (19, 19)

    def test_residual_takes_max(self):
        b = GraphBuilder(4)
        h = b.conv(b.input_id, 4, 5, padding=2)
        y = b.add(b.input_id, h)
        assert receptive_field(b.finish({"y": y}), "y") == (5, 5)

    @pytest.mark.parametrize("lr", [True, False])
    def test_p32_matches_chain(self, lr):
        g = build_cednet(CEDNET_T.replace(stages=1, lr_block=lr))
        assert receptive_field(g, "p32")[0] == chain_rf(3, 2, 4, 2, lr)

    def test_lr_margin(self):
        cfg = CEDNET_T.replace(stages=1)
        with_lr = receptive_field(build_cednet(cfg), "p32")[0]
        without = receptive_field(build_cednet(cfg.replace(lr_block=False)), "p32")[0]
        n_lr = cfg.blocks[3]
        assert (with_lr, without) == (2123, 971)
        assert with_lr - without >= 12 * n_lr * 32

    def test_upsample_does_not_shrink(self):
        g = build_cednet(CEDNET_T.replace(stages=1))
        assert receptive_field(g, "p8")[0] > receptive_field(g, "stage1.enc.s8.block1.residual")[0]


class TestReport:
    @pytest.fixture(scope="class")
    @staticmethod
    def report():
        return emit_report(build_cednet(CEDNET_T, "classification"), (224, 224))

    def test_consistent_with_ops(self, report):
        g = build_cednet(CEDNET_T, "classification")
        assert report.total_params == count_params(g)[0]
        assert report.flops == count_flops(g, (224, 224))
        assert report.fusion_time_ratio == fusion_time_ratio(g)
        assert sum(report.params_by_node.values()) == report.total_params
        assert sum(report.params_by_module.values()) == report.total_params
        assert sum(report.flops_by_module.values()) == report.flops

    def test_json_round_trip(self, report):
        back = AnalysisReport.from_json(report.to_json())
        assert back == report
        assert json.loads(report.to_json())["report_version"] == 1

    def test_csv_rows(self, report):
        lines = report.to_csv().strip().splitlines()
        assert lines[0] == "module,params,macs"
        assert [l.split(",")[0] for l in lines[1:]] == ["stem", "stage1", "stage2", "stage3", "head"]
        assert sum(int(l.split(",")[1]) for l in lines[1:]) == report.total_params

    def test_dense_report_has_rfs(self):
        rep = emit_report(build_cednet(CEDNET_T.replace(stages=1)), (64, 64))
        assert set(rep.receptive_field) == {"p8", "p16", "p32"}

    def test_table_lists_totals(self, report):
        assert "31,270,408" in report.to_table()
