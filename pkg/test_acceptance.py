"""
Test Acceptance

End-to-end ordering on a seeded synthetic corpus: enhancing obstruents or
vowels alone improves on the original, enhancing both beats either, and every
modified scope lowers the mel cepstral distortion.
"""
import logging

import pytest

from metrics import TemplateStore
from pipeline import ErrorType, Method, Scope, batch_enhance, evaluate_manifest
from stimuli import corpus_specs, write_corpus
from transforms import TemplateBank
from utils import result_rows, summarize

logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger('acceptance_test')

WORDS = ['sasa', 'kaka', 'tata', 'TaTa']
ERRORS = [ErrorType.GS, ErrorType.PSNAE, ErrorType.PA, ErrorType.VELAR]
SEEDS = list(range(10))
BOTH_MARGIN = 0.02
JOBS = 4


@pytest.fixture(scope='module')
def summary(tmp_path_factory):
    out = tmp_path_factory.mktemp('acceptance')
    files = write_corpus(str(out), corpus_specs(WORDS, ERRORS, SEEDS))
    logger.info(f"Corpus: {files.num_words} word(s), {files.num_templates} template(s)")
    templates = TemplateStore(files.template_index)
    bank = TemplateBank.load(files.bank_dir)

    rows = result_rows(evaluate_manifest(files.manifest, templates, jobs=JOBS))
    for scope in Scope:
        report = batch_enhance(files.manifest, scope=scope, method=Method.RULE, bank=bank,
                               templates=templates, jobs=JOBS)
        assert report.success, [r.message for r in report.failed]
        rows.extend(result_rows(report))

    table = {}
    for row in summarize(rows):
        table.setdefault((row['word'], row['error']), {})[row['scope']] = row
    return table


@pytest.mark.slow
def test_every_group_is_scored(summary):
    assert len(summary) == 10
    for group, scopes in summary.items():
        assert set(scopes) == {'original', 'obstruent', 'vowel', 'both'}, group
        assert all(s['n'] == len(SEEDS) for s in scopes.values()), group


@pytest.mark.slow
@pytest.mark.parametrize('metric', ['p_stoi', 'p_estoi'])
def test_scope_ordering(summary, metric):
    """original < obstruent, original < vowel, both > max(obstruent, vowel) + margin"""
    for (word, error), scopes in sorted(summary.items()):
        original = scopes['original'][metric]
        obstruent = scopes['obstruent'][metric]
        vowel = scopes['vowel'][metric]
        both = scopes['both'][metric]
        logger.info(f"{word} {error} {metric}: original {original:.3f}, obstruent {obstruent:.3f}, "
                    f"vowel {vowel:.3f}, both {both:.3f}")
        assert original < obstruent, (word, error)
        assert original < vowel, (word, error)
        assert both >= max(obstruent, vowel) + BOTH_MARGIN, (word, error)


@pytest.mark.slow
def test_mcd_ordering(summary):
    """Every modified scope has a lower mean MCD than the original words"""
    for (word, error), scopes in sorted(summary.items()):
        original = scopes['original']['mcd']
        enhanced = {s: round(scopes[s]['mcd'], 2) for s in ('obstruent', 'vowel', 'both')}
        logger.info(f"{word} {error} mcd: original {original:.2f}, enhanced {enhanced}")
        for scope in enhanced:
            assert scopes[scope]['mcd'] < original, (word, error, scope)


if __name__ == "__main__":
    pytest.main([__file__])
