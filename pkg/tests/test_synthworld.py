import os

import numpy as np
import pytest

from sghoi import synthworld
from sghoi.datamodel import ConfigError, ContractError, SceneGraph, validate_scene_graph


def small_world(seed=11, **overrides):
    base = dict(
        seed=seed,
        num_scenes=6,
        humans_per_scene=(2, 2),
        objects_per_scene=(3, 4),
        canvas=(320, 240),
        num_object_categories=6,
        num_predicates=5,
        num_interactions=4,
        feature_dim=8,
        feature_noise=0.2,
    )
    base.update(overrides)
    return synthworld.WorldConfig(**base)


def small_vocab(config):
    return synthworld.default_vocabulary(
        config.num_object_categories, config.num_predicates, config.num_interactions
    )


class TestRuleTable:
    def test_default_table_has_wildcard_and_category_rules(self):
        vocab = synthworld.default_vocabulary()
        table = synthworld.default_rule_table(vocab)
        wild = [r for r in table.rules if r.category_id is None]
        keyed = [r for r in table.rules if r.category_id is not None]
        assert len(wild) == 3 and len(keyed) == 3

    def test_duplicate_keys_rejected(self):
        with pytest.raises(ConfigError):
            synthworld.RuleTable(
                (synthworld.Rule(0, 1, 0), synthworld.Rule(0, 1, 1))
            )

    def test_wildcard_overlap_rejected(self):
        with pytest.raises(ConfigError):
            synthworld.RuleTable(
                (synthworld.Rule(0, None, 0), synthworld.Rule(0, 2, 1))
            )

    def test_predicate_only_table_is_all_wildcards(self):
        vocab = synthworld.default_vocabulary()
        table = synthworld.predicate_only_rule_table(vocab)
        assert all(r.category_id is None for r in table.rules)
        assert len(table.rules) == vocab.num_interactions

    def test_rule_beyond_vocab_rejected_at_generation(self):
        config = small_world()
        bad = synthworld.RuleTable((synthworld.Rule(99, None, 0),))
        with pytest.raises(ConfigError):
            synthworld.generate_world(config, bad)


class TestRuleLabel:
    def _fixture(self):
        config = small_world()
        vocab = small_vocab(config)
        rules = synthworld.default_rule_table(vocab)
        scenes = synthworld.generate_world(config, rules)
        return scenes, rules, vocab

    def test_direct_rule_application(self):
        scenes, rules, _ = self._fixture()
        for sg, _, ann in scenes:
            for edge in sg.edges:
                subject = sg.node_by_id(edge.subject_id)
                target = sg.node_by_id(edge.object_id)
                if not subject.is_human or target.is_human:
                    continue
                hit = rules.lookup(edge.predicate_id, target.category_id)
                labels = synthworld.rule_label(sg, subject.node_id, target.node_id, rules)
                if hit is not None:
                    assert hit in labels

    def test_no_edge_gives_empty_set(self):
        scenes, rules, _ = self._fixture()
        sg = scenes[0][0]
        connected = {(e.subject_id, e.object_id) for e in sg.edges}
        humans = [n for n in sg.nodes if n.is_human]
        objects = [n for n in sg.nodes if not n.is_human]
        for human in humans:
            for obj in objects:
                if (human.node_id, obj.node_id) not in connected:
                    assert synthworld.rule_label(sg, human.node_id, obj.node_id, rules) == set()

    def test_two_matching_rules_give_two_labels(self):
        from tests.conftest import make_edge

        config = small_world()
        vocab = small_vocab(config)
        rules = synthworld.RuleTable(
            (synthworld.Rule(0, None, 0), synthworld.Rule(1, None, 1))
        )
        scenes = synthworld.generate_world(config, rules)
        sg = scenes[0][0]
        human = next(n for n in sg.nodes if n.is_human)
        obj = next(n for n in sg.nodes if not n.is_human)
        doubled = SceneGraph(
            sg.image_id,
            sg.image_width,
            sg.image_height,
            sg.nodes,
            (
                make_edge(human.node_id, obj.node_id, 0, config.num_predicates),
                make_edge(human.node_id, obj.node_id, 1, config.num_predicates),
            ),
        )
        labels = synthworld.rule_label(doubled, human.node_id, obj.node_id, rules)
        # exhaustive enumeration over the rule table
        expected = set()
        for edge in doubled.edges:
            for rule in rules.rules:
                if rule.predicate_id == edge.predicate_id and (
                    rule.category_id is None or rule.category_id == obj.category_id
                ):
                    expected.add(rule.interaction_id)
        assert labels == expected and len(labels) == 2

    def test_non_human_first_argument_rejected(self):
        scenes, rules, _ = self._fixture()
        sg = scenes[0][0]
        obj = next(n for n in sg.nodes if not n.is_human)
        other = next(n for n in sg.nodes if n.node_id != obj.node_id)
        with pytest.raises(ContractError):
            synthworld.rule_label(sg, obj.node_id, other.node_id, rules)


class TestGenerateWorld:
    def test_deterministic_output_files(self, tmp_path):
        config = small_world()
        vocab = small_vocab(config)
        rules = synthworld.default_rule_table(vocab)
        dir_a, dir_b = str(tmp_path / "a"), str(tmp_path / "b")
        synthworld.write_dataset(config, rules, dir_a)
        synthworld.write_dataset(config, rules, dir_b)
        files_a = sorted(os.listdir(dir_a))
        assert files_a == sorted(os.listdir(dir_b))
        for name in files_a:
            with open(os.path.join(dir_a, name), "rb") as fa, open(
                os.path.join(dir_b, name), "rb"
            ) as fb:
                assert fa.read() == fb.read(), name

    def test_zero_noise_collapses_to_prototypes(self):
        config = small_world(feature_noise=0.0)
        rules = synthworld.default_rule_table(small_vocab(config))
        scenes = synthworld.generate_world(config, rules)
        by_category = {}
        for sg, bundle, _ in scenes:
            for node in sg.nodes:
                vec = bundle.features[node.node_id]
                seen = by_category.setdefault(node.category_id, vec)
                assert np.array_equal(seen, vec)

    def test_pair_count_contract(self):
        config = small_world(
            num_scenes=100,
            humans_per_scene=(2, 2),
            objects_per_scene=(4, 4),
            canvas=(640, 480),
        )
        rules = synthworld.default_rule_table(small_vocab(config))
        scenes = synthworld.generate_world(config, rules)
        assert len(scenes) == 100
        for sg, _, _ in scenes:
            humans = [n for n in sg.nodes if n.is_human]
            objects = [n for n in sg.nodes if not n.is_human]
            assert len(humans) * len(objects) == 8

    def test_generated_boxes_satisfy_invariants(self):
        config = small_world(num_scenes=20)
        rules = synthworld.default_rule_table(small_vocab(config))
        for sg, bundle, ann in synthworld.generate_world(config, rules):
            assert validate_scene_graph(sg) == []
            assert bundle.covers(sg)
            for node in sg.nodes:
                assert node.box.x_br <= sg.image_width
                assert node.box.y_br <= sg.image_height

    def test_annotations_follow_rule_label(self):
        config = small_world(num_scenes=10)
        vocab = small_vocab(config)
        rules = synthworld.default_rule_table(vocab)
        for sg, _, ann in synthworld.generate_world(config, rules):
            expected = set()
            for human in sg.nodes:
                if not human.is_human:
                    continue
                for obj in sg.nodes:
                    if obj.is_human:
                        continue
                    for k in synthworld.rule_label(sg, human.node_id, obj.node_id, rules):
                        expected.add((human.node_id, obj.node_id, k))
            got = set()
            for hoi in ann.hois:
                human = next(n for n in sg.nodes if n.box == hoi.human_box and n.is_human)
                obj = next(
                    n for n in sg.nodes if n.box == hoi.object_box and not n.is_human
                )
                got.add((human.node_id, obj.node_id, hoi.interaction_id))
            assert got == expected

    def test_relabeling_property(self):
        """Consistently renaming node ids renames the label function's output."""
        config = small_world(num_scenes=3)
        vocab = small_vocab(config)
        rules = synthworld.default_rule_table(vocab)
        rng = np.random.default_rng(0)
        for sg, _, _ in synthworld.generate_world(config, rules):
            ids = [n.node_id for n in sg.nodes]
            new_ids = {old: int(new) for old, new in zip(ids, rng.permutation(len(ids)) + 100)}
            renamed = SceneGraph(
                sg.image_id,
                sg.image_width,
                sg.image_height,
                tuple(
                    type(n)(new_ids[n.node_id], n.category_id, n.box, n.score, n.is_human)
                    for n in sg.nodes
                ),
                tuple(
                    type(e)(
                        new_ids[e.subject_id],
                        new_ids[e.object_id],
                        e.predicate_id,
                        e.confidence,
                        e.soft_distribution,
                    )
                    for e in sg.edges
                ),
            )
            for human in sg.nodes:
                if not human.is_human:
                    continue
                for obj in sg.nodes:
                    if obj.is_human:
                        continue
                    original = synthworld.rule_label(sg, human.node_id, obj.node_id, rules)
                    relabeled = synthworld.rule_label(
                        renamed, new_ids[human.node_id], new_ids[obj.node_id], rules
                    )
                    assert original == relabeled

    def test_edge_dropout_removes_edges_not_labels(self):
        config = small_world(num_scenes=30, edge_dropout=0.5)
        clean = small_world(num_scenes=30)
        vocab = small_vocab(config)
        rules = synthworld.default_rule_table(vocab)
        noisy_scenes = synthworld.generate_world(config, rules)
        clean_scenes = synthworld.generate_world(clean, rules)
        noisy_edges = sum(len(sg.edges) for sg, _, _ in noisy_scenes)
        clean_edges = sum(len(sg.edges) for sg, _, _ in clean_scenes)
        assert noisy_edges < clean_edges
        # labels were computed before dropout: some scenes keep a GT whose edge vanished
        assert any(len(ann.hois) > 0 for _, _, ann in noisy_scenes)

    def test_human_human_edges_use_dedicated_predicates(self):
        config = small_world(num_scenes=40, human_edge_prob=1.0)
        vocab = small_vocab(config)
        rules = synthworld.default_rule_table(vocab)
        hh = synthworld.num_hh_predicates(config.num_predicates)
        usable = config.num_predicates - hh
        found_hh_edge = False
        for sg, _, _ in synthworld.generate_world(config, rules):
            for edge in sg.edges:
                subject = sg.node_by_id(edge.subject_id)
                target = sg.node_by_id(edge.object_id)
                if subject.is_human and target.is_human:
                    found_hh_edge = True
                    assert edge.predicate_id >= usable
                else:
                    assert edge.predicate_id < usable
        assert found_hh_edge

    def test_manifest_counts_and_rare_classes(self, tmp_path):
        config = small_world(num_scenes=25)
        vocab = small_vocab(config)
        rules = synthworld.default_rule_table(vocab)
        manifest = synthworld.write_dataset(config, rules, str(tmp_path / "d"))
        assert len(manifest["scenes"]) == 25
        counts = manifest["interaction_counts"]
        assert len(counts) == config.num_interactions
        total = sum(counts)
        for k in manifest["rare_classes"]:
            assert counts[k] < 0.5 * total / len(counts)

    def test_world_config_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            synthworld.WorldConfig.from_payload({"seed": 1, "bogus": 2})
