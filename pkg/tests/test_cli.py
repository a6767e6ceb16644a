from pathlib import Path
import sys

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import PlannerCLI
from skyway.sdcq import AgentConfig, SDCQAgent
from skyway.worldmap import OccupancyGrid, ScenarioSpec, export_map, import_map


def _open_map(tmp_path: Path) -> Path:
    grid = OccupancyGrid.from_extent((-2.0, 0.0, 0.0), (2.0, 12.0, 3.0), 0.25)
    return export_map(grid, tmp_path / "open.map")


def _small_preset(name, seed=0):
    return ScenarioSpec("forest", ((-3.0, 0.0, 0.0), (3.0, 12.0, 3.0)), obstacle_count=6, resolution=0.25,
                        rng_seed=int(seed))


def test_gen_map_writes_a_loadable_map(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(PlannerCLI, "named_scenario", _small_preset)
    target = tmp_path / "forest.map"

    code = PlannerCLI.main(["gen-map", "--scenario", "forest", "--seed", "3", "--out", str(target)])

    assert code == 0
    assert import_map(target).resolution == 0.25
    assert f"map: {target}" in capsys.readouterr().out


def test_export_writes_tables_and_preview(tmp_path):
    out_dir = tmp_path / "export"

    code = PlannerCLI.main([
        "export", "--map", str(_open_map(tmp_path)), "--start", "0,1,1", "--goal", "0,11,1", "--out", str(out_dir),
    ])

    assert code == 0
    assert (out_dir / "polyline.txt").exists()
    assert (out_dir / "corridor.txt").read_text(encoding="utf-8").startswith("# sub_corridors 4")
    assert (out_dir / "scene.png").read_bytes().startswith(b"\x89PNG")


def test_configuration_problems_exit_with_two(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("network:\n  port: 1\n", encoding="utf-8")

    assert PlannerCLI.main(["train", "--config", str(bad)]) == 2
    assert "unknown section 'network'" in capsys.readouterr().err
    assert PlannerCLI.main(["plan", "--map", str(_open_map(tmp_path))]) == 2
    assert PlannerCLI.main(["bench", "--profile", "reckless", "--out", str(tmp_path)]) == 2


def test_runtime_failures_exit_with_one(tmp_path, capsys):
    code = PlannerCLI.main([
        "plan", "--map", str(tmp_path / "missing.map"), "--start", "0,1,1", "--goal", "0,11,1",
        "--checkpoint", str(tmp_path / "agent.skw"),
    ])

    assert code == 1
    assert "could not read map" in capsys.readouterr().err


def test_checkpoints_for_another_observation_size_exit_with_one(tmp_path, capsys):
    checkpoint = SDCQAgent(AgentConfig(observation_size=2, bins=4, hidden=(8,))).save(tmp_path / "tiny.skw")
    map_path = str(_open_map(tmp_path))

    plan = PlannerCLI.main([
        "plan", "--map", map_path, "--start", "0,1,1", "--goal", "0,11,1", "--checkpoint", str(checkpoint),
    ])
    assert "network expects 2 observation values, environment produces 66" in capsys.readouterr().err
    exported = PlannerCLI.main([
        "export", "--map", map_path, "--start", "0,1,1", "--goal", "0,11,1", "--checkpoint", str(checkpoint),
        "--out", str(tmp_path / "export"),
    ])
    evaluated = PlannerCLI.main(["eval", "--checkpoint", str(checkpoint), "--episodes", "1"])

    assert plan == 1
    assert exported == 1
    assert evaluated == 1
    assert "network expects 2" in capsys.readouterr().err


def test_debug_flag_reraises(tmp_path):
    with pytest.raises(OSError):
        PlannerCLI.main([
            "plan", "--debug", "--map", str(tmp_path / "missing.map"), "--start", "0,1,1", "--goal", "0,11,1",
        ])


def test_points_need_three_coordinates():
    with pytest.raises(SystemExit) as exit_info:
        PlannerCLI.main(["plan", "--start", "0,1", "--goal", "0,11,1"])

    assert exit_info.value.code == 2
