import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from framedistill.config import IGNORE_ID, Intrinsics
from framedistill.errors import FormatError, ValidationError
from framedistill.frameio import SemanticMask
from framedistill.geometry import project_camera_points
from framedistill.labelspace import (
    CEILING,
    FLOOR,
    NON_STRUCTURAL,
    WALL,
    LabelMap,
    builtin_structural_map,
    load_label_map,
    parse_label_map,
    remap_labels,
    remap_mask,
    transfer_labels,
)

SOURCE = ["wall", "building", "floor", "sidewalk", "road", "ceiling", "chair", "desk",
          "furniture", "person", "plant"]
ID = {n: i for i, n in enumerate(SOURCE)}


def _proj(cam, w=5, h=4):
    return project_camera_points(np.asarray(cam, dtype=float), Intrinsics(1.0, 1.0, 0.0, 0.0, w, h), 0.1)


def _mask(ids, w=5, h=4):
    return SemanticMask(w, h, np.asarray(ids, dtype=np.uint16).reshape(-1))


@pytest.mark.parametrize("variant", ["pseudo", "real"])
def test_structural_groups(variant):
    m = builtin_structural_map(SOURCE, variant)
    assert m.apply([ID["wall"], ID["building"]]).tolist() == [WALL, WALL]
    assert m.apply([ID["floor"], ID["sidewalk"], ID["road"]]).tolist() == [FLOOR] * 3
    assert m.apply([ID["ceiling"]]).tolist() == [CEILING]
    assert m.apply([IGNORE_ID]).tolist() == [IGNORE_ID]


def test_pseudo_variant_drops_furniture():
    m = builtin_structural_map(SOURCE, "pseudo")
    assert m.apply([ID["chair"], ID["desk"], ID["furniture"]]).tolist() == [IGNORE_ID] * 3
    assert m.apply([ID["person"]]).tolist() == [NON_STRUCTURAL]


def test_real_variant_keeps_furniture_as_non_structural():
    m = builtin_structural_map(SOURCE, "real")
    assert m.apply([ID["desk"], ID["chair"], ID["plant"]]).tolist() == [NON_STRUCTURAL] * 3


def test_configurable_ignore_list_and_unlisted_sources():
    m = builtin_structural_map(SOURCE, "real", ignored=["plant"])
    assert m.apply([ID["plant"], ID["desk"]]).tolist() == [IGNORE_ID, NON_STRUCTURAL]
    # ids beyond the declared taxonomy are not in the table
    assert m.apply([len(SOURCE), 40000]).tolist() == [IGNORE_ID, IGNORE_ID]


def test_remap_mask_building_to_wall():
    m = builtin_structural_map(SOURCE, "pseudo")
    mask = SemanticMask(3, 1, np.array([ID["building"], ID["sidewalk"], ID["chair"]], np.uint16))
    assert remap_mask(mask, m).ids.tolist() == [WALL, FLOOR, IGNORE_ID]


def test_label_map_rejects_out_of_range_target():
    with pytest.raises(ValueError):
        LabelMap.from_pairs({0: 4}, 4)


@given(arrays(np.uint16, st.integers(0, 40), elements=st.sampled_from([0, 1, 2, 3, IGNORE_ID])))
def test_identity_remap_is_idempotent(ids):
    ident = LabelMap.identity(4)
    once = remap_labels(ids, ident)
    assert once.tolist() == ids.tolist()
    assert remap_labels(once, ident).tolist() == once.tolist()


# -- text format --------------------------------------------------------------

def test_parse_label_map(tmp_path):
    p = tmp_path / "map.tsv"
    p.write_text("# source -> target\n0\t0\n7\tIGNORE\n12\t3  # trailing comment\n\n")
    m = load_label_map(p)
    assert m.apply([0, 7, 12, 5]).tolist() == [0, IGNORE_ID, 3, IGNORE_ID]


@pytest.mark.parametrize("text", ["1\t0\n1\t2\n", "1\t4\n", "1\n", "x\t1\n", "70000\t1\n"])
def test_parse_label_map_rejects(text):
    with pytest.raises(FormatError) as exc:
        parse_label_map(text, 4, source="m.tsv")
    assert "m.tsv" in str(exc.value)


# -- transfer -----------------------------------------------------------------

def test_all_invalid_points_get_ignore():
    proj = _proj([[0, 0, -1], [100, 0, 1]])
    assert transfer_labels(proj, _mask(np.zeros(20))).tolist() == [IGNORE_ID, IGNORE_ID]


def test_direct_lookup():
    ids = np.full((4, 5), FLOOR)
    ids[2, 3] = WALL
    proj = _proj([[3, 2, 1]])
    assert (proj.px[0], proj.py[0]) == (3, 2)
    assert transfer_labels(proj, _mask(ids)).tolist() == [WALL]


def test_two_points_same_pixel_share_label():
    ids = np.arange(20) % 4
    proj = _proj([[1, 1, 1], [2, 2, 2]])
    lab = transfer_labels(proj, _mask(ids))
    assert lab[0] == lab[1] == ids[1 * 5 + 1]


def test_occlusion_filter_is_opt_in():
    proj = _proj([[1, 1, 1], [3, 3, 3], [2, 2, 1.0]])
    mask = _mask(np.full(20, CEILING))
    assert transfer_labels(proj, mask).tolist() == [CEILING] * 3
    lab = transfer_labels(proj, mask, occlusion_tol_m=0.5)
    assert lab.tolist() == [CEILING, IGNORE_ID, CEILING]


def test_transfer_size_mismatch():
    with pytest.raises(ValidationError):
        transfer_labels(_proj([[0, 0, 1]]), _mask(np.zeros(30), w=6, h=5))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_transfer_properties(seed):
    rng = np.random.default_rng(seed)
    cam = np.column_stack([rng.uniform(-1, 6, (40, 2)), rng.uniform(-0.5, 2, 40)])
    proj = _proj(cam)
    n_src = len(SOURCE)
    ids = rng.integers(0, n_src, 20)
    ids[rng.random(20) < 0.2] = IGNORE_ID
    mask = _mask(ids)
    lab = transfer_labels(proj, mask)
    assert np.all(lab[~proj.valid] == IGNORE_ID)
    # element-wise maps commute with per-point lookup
    for variant in ("pseudo", "real"):
        m = builtin_structural_map(SOURCE, variant)
        assert remap_labels(lab, m).tolist() == transfer_labels(proj, remap_mask(mask, m)).tolist()
