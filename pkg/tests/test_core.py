import numpy as np
import pytest

from qmri.core import (
    AcquisitionParams,
    ContrastStack,
    DomainError,
    MultiechoSession,
    PropertyMap,
    Protocol,
    TissueProperties,
    require_valid,
    seeded_rng,
    spawn_seeds,
    validate,
)


def test_seeded_rng_is_reproducible():
    assert np.array_equal(seeded_rng(5).random(10), seeded_rng(5).random(10))
    assert not np.array_equal(seeded_rng(5).random(10), seeded_rng(6).random(10))
    a = spawn_seeds(seeded_rng(1), 4)
    assert a == spawn_seeds(seeded_rng(1), 4) and len(set(a)) == 4


def test_validate_reports_paths():
    proto = Protocol((AcquisitionParams(37, 5, 20), AcquisitionParams(37, 50, 20)))
    problems = validate(proto)
    assert [v.path for v in problems] == ["entries[1].te_ms"]
    assert validate(TissueProperties(1000, 50, 1.0)) == []
    assert validate(TissueProperties(-1, 50, 0.0))


def test_multiecho_session_rules():
    ok = MultiechoSession.build(37.0, 20.0, [7, 15, 25])
    assert validate(ok) == []
    assert ok.te_ms == (7.0, 15.0, 25.0) and ok.tr_ms == 37.0 and ok.fa_deg == 20.0
    unsorted = MultiechoSession.build(37.0, 20.0, [15, 7, 25])
    assert any("increasing" in v.message for v in validate(unsorted))
    mixed = MultiechoSession((AcquisitionParams(37, 5, 20), AcquisitionParams(40, 9, 20)))
    assert any("tr_ms" in v.message for v in validate(mixed))
    with pytest.raises(DomainError):
        require_valid(unsorted)


def test_protocol_round_trip():
    s = MultiechoSession.build(37.0, 20.0, [7, 15, 25])
    back = Protocol.from_dict(s.to_dict())
    assert isinstance(back, MultiechoSession) and back == s
    p = Protocol.from_array(np.array([[37.0, 5.0, 20.0], [60.0, 9.0, 45.0]]))
    assert Protocol.from_dict(p.to_dict()) == p
    np.testing.assert_array_equal(p.as_array(), [[37.0, 5.0, 20.0], [60.0, 9.0, 45.0]])


def test_property_map_accessors():
    t1 = np.arange(6, dtype=float).reshape(2, 3) + 500
    pm = PropertyMap(t1, t1 / 10, np.full((2, 3), 0.5), mask=np.array([[1, 0, 1], [0, 1, 0]], bool))
    assert pm.shape == (2, 3) and pm.width == 3 and pm.height == 2
    assert pm.voxel(2, 1) == TissueProperties(505.0, 50.5, 0.5)
    flat = pm.flat()
    assert flat.shape == (6, 3)
    back = PropertyMap.from_flat(flat, 2, 3, pm.mask)
    np.testing.assert_array_equal(back.t1_ms, pm.t1_ms)
    np.testing.assert_array_equal(pm.foreground(), pm.mask)
    assert PropertyMap(t1, t1, t1 / 1000).foreground().all()
    with pytest.raises(ValueError):
        pm.t1_ms[0, 0] = 1.0


def test_property_map_validation_counts_bad_voxels():
    pd = np.full((3, 3), 0.5)
    pd[1, 2] = 0.0
    problems = validate(PropertyMap(np.full((3, 3), 900.0), np.full((3, 3), 40.0), pd))
    assert len(problems) == 1 and problems[0].path == "voxels[5].pd"


def test_stack_validation():
    proto = Protocol((AcquisitionParams(37, 5, 20),))
    assert validate(ContrastStack(np.ones((1, 2, 2)), proto)) == []
    assert validate(ContrastStack(np.ones((2, 2, 2)), proto))
    neg = -np.ones((1, 2, 2))
    assert validate(ContrastStack(neg, proto))
    assert validate(ContrastStack(neg, proto, noisy=True)) == []
    vox = ContrastStack(np.arange(8.0).reshape(2, 2, 2), Protocol(proto.entries * 2)).voxels()
    np.testing.assert_array_equal(vox[1], [1.0, 5.0])
