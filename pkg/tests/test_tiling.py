import numpy as np
import pytest

from gevsar.dataset import ParamRanges, make_dataset
from gevsar.errors import DomainError, FormatError, InputShapeError, TruncatedPayloadError
from gevsar.lattice import LatticeConfig, ModelParams, synthesize_field
from gevsar.rng import substream
from gevsar.tiling import (
    GridStack,
    Tile,
    TileResult,
    estimate_tiles,
    ingest_grid,
    make_tiles,
    simulate_at_tile,
    smooth_surface,
    write_grid,
)
from gevsar.training import TrainConfig, train

CFG = LatticeConfig(grid_dim=16)


@pytest.fixture(scope="module")
def small_net():
    ds = make_dataset(250, 3, CFG, ParamRanges(), seed=811)
    result = train(ds, TrainConfig(epochs=2, batch_size=50, seed=812))
    return result.weights, ds.norm


def _grid_from_tiles(theta_by_quadrant, years, seed):
    """Synthetic 32 x 32 grid stitched from four independently simulated tiles."""
    values = np.empty((32, 32, years))
    for q, ((r0, c0), theta) in enumerate(theta_by_quadrant.items()):
        stack = synthesize_field(theta, CFG, years, substream(seed, q))
        values[r0 : r0 + 16, c0 : c0 + 16, :] = stack.values
    return GridStack(values=values, mask=np.ones((32, 32), dtype=bool))


class TestGridIo:
    def test_round_trip(self, tmp_path):
        rng = substream(821)
        grid = GridStack(values=rng.standard_normal((20, 24, 3)), mask=np.ones((20, 24), dtype=bool))
        write_grid(grid, tmp_path / "g")
        back = ingest_grid(tmp_path / "g")
        assert back.shape == (20, 24, 3)
        assert np.max(np.abs(back.values - grid.values)) < 1e-6  # float32 storage
        assert np.all(back.mask)

    def test_nan_cell_masked(self, tmp_path):
        rng = substream(823)
        values = rng.standard_normal((18, 18, 2)).astype(np.float32)
        values[3, 4, 1] = np.nan
        grid_dir = tmp_path / "g"
        grid_dir.mkdir()
        import json

        (grid_dir / "manifest.json").write_text(
            json.dumps({"format": "gevsar-grid", "format_version": 1, "n_y": 18, "n_x": 18, "years": 2, "mask_present": False})
        )
        (grid_dir / "values.bin").write_bytes(np.ascontiguousarray(values, dtype="<f4").tobytes())
        back = ingest_grid(grid_dir)
        assert back.mask.sum() == 18 * 18 - 1
        assert not back.mask[3, 4]

    def test_paper_scale_dimensions(self, tmp_path):
        values = np.zeros((297, 281, 31), dtype=np.float32)
        grid = GridStack(values=values, mask=np.ones((297, 281), dtype=bool))
        write_grid(grid, tmp_path / "big")
        back = ingest_grid(tmp_path / "big")
        assert back.shape == (297, 281, 31)

    def test_truncated_values(self, tmp_path):
        rng = substream(825)
        grid = GridStack(values=rng.standard_normal((17, 17, 1)), mask=np.ones((17, 17), dtype=bool))
        write_grid(grid, tmp_path / "g")
        raw = (tmp_path / "g" / "values.bin").read_bytes()
        (tmp_path / "g" / "values.bin").write_bytes(raw[:-4])
        with pytest.raises(TruncatedPayloadError):
            ingest_grid(tmp_path / "g")

    def test_missing_manifest(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(FormatError):
            ingest_grid(tmp_path / "empty")


class TestMakeTiles:
    def test_sixty_four_grid(self):
        grid = GridStack(values=np.zeros((64, 64, 1)), mask=np.ones((64, 64), dtype=bool))
        tiles = make_tiles(grid, tile_size=16)
        assert len(tiles) == 16
        centers = {t.center for t in tiles}
        assert (8.0, 8.0) in centers and (8.0, 24.0) in centers and (56.0, 56.0) in centers

    def test_remainder_strip_dropped(self):
        grid = GridStack(values=np.zeros((17, 16, 1)), mask=np.ones((17, 16), dtype=bool))
        tiles = make_tiles(grid, tile_size=16)
        assert len(tiles) == 1
        assert tiles[0].row_off == 0 and tiles[0].col_off == 0

    def test_masked_tiles_dropped(self):
        mask = np.ones((32, 32), dtype=bool)
        mask[:16, :16] = False  # fully masked quadrant
        mask[0:8, 16:32] = False  # half-masked quadrant
        grid = GridStack(values=np.zeros((32, 32, 1)), mask=mask)
        tiles = make_tiles(grid, tile_size=16, min_valid_fraction=0.9)
        offsets = {(t.row_off, t.col_off) for t in tiles}
        assert offsets == {(16, 0), (16, 16)}

    def test_partition_property(self):
        grid = GridStack(values=np.zeros((48, 80, 1)), mask=np.ones((48, 80), dtype=bool))
        tiles = make_tiles(grid, tile_size=16)
        cells = set()
        for t in tiles:
            for dy in range(16):
                for dx in range(16):
                    cell = (t.row_off + dy, t.col_off + dx)
                    assert cell not in cells
                    cells.add(cell)
        assert len(cells) == len(tiles) * 256

    def test_tile_too_large(self):
        grid = GridStack(values=np.zeros((8, 8, 1)), mask=np.ones((8, 8), dtype=bool))
        with pytest.raises(DomainError):
            make_tiles(grid, tile_size=16)


class TestEstimateTiles:
    def test_quadrant_ordering_recovered(self, small_net):
        weights, norm = small_net
        quadrants = {
            (0, 0): ModelParams(0.15, 0.1, 0.01),
            (0, 16): ModelParams(0.45, 0.1, 0.01),
            (16, 0): ModelParams(0.75, 0.1, 0.01),
            (16, 16): ModelParams(0.45, 1.0, 0.01),
        }
        grid = _grid_from_tiles(quadrants, years=3, seed=831)
        results = estimate_tiles(grid, weights, norm)
        assert len(results) == 4
        assert all(r.error is None for r in results)
        by_offset = {(r.tile.row_off, r.tile.col_off): r for r in results}
        # xi ordering across the left-column quadrants matches the simulation
        assert by_offset[(0, 0)].raw[0] < by_offset[(16, 0)].raw[0]

    def test_channel_mismatch_instructive_error(self, small_net):
        weights, norm = small_net
        grid = GridStack(values=np.zeros((16, 16, 7)), mask=np.ones((16, 16), dtype=bool))
        with pytest.raises(InputShapeError) as err:
            estimate_tiles(grid, weights, norm)
        assert "re-train" in str(err.value)

    def test_all_masked_empty_success(self, small_net):
        weights, norm = small_net
        grid = GridStack(values=np.zeros((16, 16, 3)), mask=np.zeros((16, 16), dtype=bool))
        results = estimate_tiles(grid, weights, norm)
        assert results == []

    def test_repeat_run_identical(self, small_net):
        weights, norm = small_net
        grid = _grid_from_tiles({(0, 0): ModelParams(0.3, 0.2, 0.01)}, years=3, seed=833)
        sub = GridStack(values=grid.values[:16, :16], mask=grid.mask[:16, :16])
        a = estimate_tiles(sub, weights, norm)
        b = estimate_tiles(sub, weights, norm)
        assert np.array_equal(a[0].raw, b[0].raw)

    def test_degenerate_tile_recorded_not_raised(self, small_net):
        weights, norm = small_net
        values = np.ones((16, 16, 3))  # constant field cannot be standardized
        grid = GridStack(values=values, mask=np.ones((16, 16), dtype=bool))
        results = estimate_tiles(grid, weights, norm)
        assert len(results) == 1
        assert results[0].error is not None
        assert results[0].raw is None

    def test_implausible_estimates_flagged_not_clamped(self, small_net):
        weights, norm = small_net
        grid = _grid_from_tiles({(0, 0): ModelParams(0.3, 0.2, 0.01)}, years=3, seed=835)
        sub = GridStack(values=grid.values[:16, :16], mask=grid.mask[:16, :16])
        narrow = ParamRanges(xi_range=(0.49, 0.51), kappa2_range=(0.0999, 0.1001), tau2_range=(0.00999, 0.01001))
        results = estimate_tiles(sub, weights, norm, ranges=narrow)
        res = results[0]
        assert res.error is None
        assert any(f.startswith("implausible-") for f in res.flags)
        assert res.corrected is not None  # value kept, not clamped


class TestSimulateAtTile:
    def test_shapes_and_determinism(self):
        tile = Tile(tile_id=0, row_off=0, col_off=0, size=16)
        res = TileResult(tile=tile, corrected=np.array([0.4, 0.3, 0.02]))
        sims_a = simulate_at_tile(res, CFG, reps=3, years=2, rng=substream(841))
        sims_b = simulate_at_tile(res, CFG, reps=3, years=2, rng=substream(841))
        assert len(sims_a) == 3
        assert sims_a[0].values.shape == (16, 16, 2)
        assert np.array_equal(sims_a[1].values, sims_b[1].values)

    def test_invalid_corrected_rejected(self):
        tile = Tile(tile_id=0, row_off=0, col_off=0, size=16)
        res = TileResult(tile=tile, corrected=np.array([1.4, 0.3, 0.02]))
        with pytest.raises(DomainError):
            simulate_at_tile(res, CFG, reps=1, years=1, rng=substream(843))


class TestSmoothSurface:
    def _result(self, row, col, values, flags=()):
        tile = Tile(tile_id=row * 10 + col, row_off=row * 16, col_off=col * 16, size=16)
        return TileResult(tile=tile, corrected=np.asarray(values, dtype=float), flags=list(flags))

    def test_single_tile_constant_surface(self):
        res = self._result(0, 0, [0.4, 0.2, 0.01])
        surf = smooth_surface([res], bandwidth=5.0)
        assert surf["xi"][0] == pytest.approx(0.4)

    def test_tiny_bandwidth_reproduces_tile_values(self):
        results = [self._result(0, 0, [0.2, 0.1, 0.01]), self._result(0, 1, [0.8, 1.0, 0.05])]
        surf = smooth_surface(results, bandwidth=1e-6)
        assert surf["xi"] == pytest.approx([0.2, 0.8])
        assert surf["kappa2"] == pytest.approx([0.1, 1.0])

    def test_two_tile_hand_weights(self):
        results = [self._result(0, 0, [0.2, 0.1, 0.01]), self._result(0, 1, [0.8, 1.0, 0.05])]
        bw = 16.0
        surf = smooth_surface(results, bandwidth=bw)
        # hand evaluation at the first center: distance 0 and 16
        w0, w1 = 1.0, np.exp(-0.5 * (16.0 / bw) ** 2)
        expected = (w0 * 0.2 + w1 * 0.8) / (w0 + w1)
        assert surf["xi"][0] == pytest.approx(expected, abs=1e-12)

    def test_flagged_tiles_excluded(self):
        results = [
            self._result(0, 0, [0.2, 0.1, 0.01]),
            self._result(0, 1, [9.9, 1.0, 0.05], flags=["implausible-xi"]),
        ]
        surf = smooth_surface(results, bandwidth=16.0)
        assert np.all(surf["xi"] == 0.2)

    def test_no_unflagged_tiles_error(self):
        results = [self._result(0, 0, [0.2, 0.1, 0.01], flags=["implausible-xi"])]
        with pytest.raises(DomainError):
            smooth_surface(results, bandwidth=4.0)
