import numpy as np
import pytest

from softvqa.scene import Scene, SceneConfig, generate_scene, ObjectRecord, relations_from_positions
from softvqa.symbolic import Answer, ExecutionFault, SceneLabels, execute_steps, symbolic_execute, try_execute


def make_labels(schema, objs, positions=None):
    """objs: list of dicts family -> value name."""
    attrs = {f: np.array([schema.value_index(f, o.get(f, schema.values[f][0])) for o in objs], dtype=int)
             for f in schema.family_names}
    n = len(objs)
    if positions is None:
        positions = np.stack([np.linspace(0.1, 0.9, n), np.linspace(0.2, 0.8, n)], axis=1)
    return SceneLabels(attrs, relations_from_positions(np.asarray(positions), schema.relations))


@pytest.fixture
def three(schema):
    return make_labels(schema, [{"color": "red", "shape": "cube"}, {"color": "red", "shape": "sphere"},
                                {"color": "blue", "shape": "cube"}])


class TestExecution:
    def test_count_red(self, three, catalog):
        prog = [("scene", None), ("filter_color", "red"), ("count", None)]
        assert symbolic_execute(prog, three, catalog) == Answer("count", 2)

    def test_exist_on_empty_set(self, three, catalog):
        prog = [("scene", None), ("filter_color", "green"), ("exist", None)]
        assert symbolic_execute(prog, three, catalog) == Answer("boolean", False)

    def test_query_single_referent(self, schema, catalog):
        lab = make_labels(schema, [{"color": "cyan", "shape": "cube"}, {"shape": "sphere"}])
        prog = [("scene", None), ("filter_shape", "cube"), ("unique", None), ("query_color", None)]
        assert symbolic_execute(prog, lab, catalog) == Answer("color", "cyan")

    def test_single_object_exists_with_own_color(self, schema, catalog):
        lab = make_labels(schema, [{"color": "purple"}])
        prog = [("scene", None), ("filter_color", "purple"), ("exist", None)]
        assert symbolic_execute(prog, lab, catalog).value is True

    def test_compare_equal_counts(self, schema, catalog):
        lab = make_labels(schema, [{"shape": "cube"}, {"shape": "sphere"}, {"shape": "cylinder"}])
        prog = [("scene", None), ("filter_shape", "cube"), ("count", None),
                ("scene", None), ("filter_shape", "sphere"), ("count", None), ("equal_integer", None)]
        assert symbolic_execute(prog, lab, catalog).value is True

    def test_operand_order_of_comparisons(self, three, catalog):
        # deeper operand (first mentioned) is compared against the top
        prog = [("scene", None), ("filter_color", "red"), ("count", None),
                ("scene", None), ("filter_color", "blue"), ("count", None), ("greater_than", None)]
        assert symbolic_execute(prog, three, catalog).value is True
        prog[-1] = ("less_than", None)
        assert symbolic_execute(prog, three, catalog).value is False

    def test_relate_and_same(self, schema, catalog):
        # x increases with index: objects 1 and 2 are right of object 0
        lab = make_labels(schema, [{"color": "red"}, {"color": "blue"}, {"color": "red"}])
        prog = [("scene", None), ("filter_color", "blue"), ("unique", None), ("relate", "right"), ("count", None)]
        assert symbolic_execute(prog, lab, catalog).value == 1
        prog = [("scene", None), ("filter_color", "blue"), ("unique", None), ("relate", "left"), ("count", None)]
        assert symbolic_execute(prog, lab, catalog).value == 1
        prog = [("scene", None), ("filter_color", "red"), ("filter_shape", "cube"), ("count", None)]
        assert symbolic_execute(prog, lab, catalog).value == 2
        same = [("scene", None), ("filter_color", "blue"), ("unique", None), ("same_color", None), ("count", None)]
        assert symbolic_execute(same, lab, catalog).value == 0
        same[1] = ("filter_color", "red")
        with pytest.raises(ExecutionFault):
            symbolic_execute(same, lab, catalog)  # two red objects, strict unique faults

    def test_union_intersect(self, three, catalog):
        base = [("scene", None), ("filter_color", "red"), ("scene", None), ("filter_shape", "cube")]
        assert symbolic_execute(base + [("intersect", None), ("count", None)], three, catalog).value == 1
        assert symbolic_execute(base + [("union", None), ("count", None)], three, catalog).value == 3

    def test_equal_attribute(self, three, catalog):
        prog = [("scene", None), ("filter_shape", "sphere"), ("unique", None), ("query_color", None),
                ("scene", None), ("filter_color", "blue"), ("unique", None), ("query_color", None),
                ("equal_color", None)]
        assert symbolic_execute(prog, three, catalog).value is False


class TestFaults:
    def test_strict_unique_faults_on_two_objects(self, three, catalog):
        with pytest.raises(ExecutionFault):
            symbolic_execute([("scene", None), ("filter_color", "red"), ("unique", None), ("count", None)],
                             three, catalog)

    def test_lenient_unique_takes_smallest_index(self, three, catalog):
        prog = [("scene", None), ("filter_color", "red"), ("unique", None), ("query_shape", None)]
        assert symbolic_execute(prog, three, catalog, strict=False) == Answer("shape", "cube")

    def test_lenient_query_of_empty_set(self, three, catalog):
        prog = [("scene", None), ("filter_color", "green"), ("query_shape", None)]
        assert symbolic_execute(prog, three, catalog, strict=False) == Answer("shape", None)

    def test_type_mismatch_and_underflow(self, three, catalog):
        with pytest.raises(ExecutionFault):
            symbolic_execute([("count", None)], three, catalog)
        with pytest.raises(ExecutionFault):
            symbolic_execute([("scene", None), ("count", None), ("filter_color", "red")], three, catalog)

    def test_unknown_function(self, three, catalog):
        with pytest.raises(ExecutionFault):
            symbolic_execute([("scene", None), ("teleport", None)], three, catalog)

    def test_try_execute_returns_none(self, three, catalog):
        assert try_execute([("scene", None)], three, catalog) is None

    def test_trace_has_one_entry_per_step(self, three, catalog):
        prog = [("scene", None), ("filter_color", "red"), ("count", None)]
        st = execute_steps(prog, three, catalog)
        assert len(st.trace) == 3


class TestAnswer:
    def test_json_round_trip(self):
        for a in (Answer("count", 3), Answer("boolean", True), Answer("color", "red")):
            assert Answer.from_json(a.to_json()) == a
