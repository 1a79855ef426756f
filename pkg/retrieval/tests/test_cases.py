"""
End-to-end questions through StemPipeline with recorded chat completions and
the bag-of-words encoder, so every retrieval score can be checked by hand.
"""

import json
import logging
import tempfile
from pathlib import Path

from django.test import SimpleTestCase, override_settings

from retrieval.config import load_run_config
from retrieval.evaluation import answer_f1, hit_at_1
from retrieval.pipeline import StemPipeline, write_run_outputs

from .helpers import QUIET_LOGGING, CaseBook, WordEncoder, make_question

logging.disable(logging.CRITICAL)

NEARBY = 'location.location.nearby_airports'
CIAMPINO = ('Rome', NEARBY, 'Ciampino–G. B. Pastine International Airport')
FIUMICINO = ('Rome', NEARBY, 'Leonardo da Vinci–Fiumicino Airport')
ROME_KG = [
    CIAMPINO,
    FIUMICINO,
    ('Rome', 'travel.travel_destination.tourist_attractions', 'Colosseum'),
    ('Italy', 'location.country.capital', 'Rome'),
]

TEXARKANA_KG = [
    ('Beech Street Historic District', 'location.location.containedby', 'Texarkana, Arkansas'),
    ('Texarkana, Arkansas', 'location.hud_county_place.county', 'Miller County'),
    ('Arkansas', 'location.administrative_division.country', 'United States of America'),
]

BESSIE_KG = [
    ('Bessie Smith', 'music.artist.genre', 'Jazz'),
    ('Bessie Smith', 'people.person.profession', 'Singer'),
    ('Bessie Smith', 'music.artist.label', 'Columbia Records'),
]

BADGERS_KG = [
    ("Wisconsin Badgers men's basketball", 'sports.school_sports_team.school', 'University of Wisconsin-Madison'),
    ('Russell Wilson', 'education.education.institution', 'University of Wisconsin-Madison'),
    ('Wisconsin Badgers', 'education.athletics_brand.teams', "Wisconsin Badgers women's ice hockey"),
    ('University of Wisconsin-Madison', 'education.educational_institution.sports_teams', "Wisconsin Badgers women's ice hockey"),
    ('m.0hpny0z', 'education.education.student', 'Russell Wilson'),
    ('m.0hpny0z', 'education.education.degree', 'Bachelor of Arts'),
]

FORREST_KG = [
    ('m.0y54dnx', 'film.performance.character', "Jenny's Father"),
    ('m.0y54dnx', 'film.performance.actor', 'Kevin Mangan'),
    ("Jenny's Father", 'film.film_character.portrayed_in_films', 'Forrest Gump'),
    ('Forrest Gump', 'film.film_character.portrayed_in_films', 'm.02xgww5'),
    ('m.02xgww5', 'film.performance.actor', 'Michael Connor Humphreys'),
]

CORFU_KG = [
    ('Corfu', 'location.administrative_division.country', 'Greece'),
    ('Greece', 'location.country.languages_spoken', 'Albanian language'),
    ('Greece', 'location.country.official_language', 'Greek Language'),
    ('Corfu', 'location.location.containedby', 'Corfu Island'),
    ('Corfu Island', 'common.topic.article', 'm.0cc3p'),
]

BRUSSELS_KG = [
    ('European Union', 'organization.organization.founders', 'Belgium'),
    ('Brussels', 'location.administrative_division.capital', 'Belgium'),
    ('European Union', 'organization.membership_organization.members', 'France'),
    ('Paris', 'location.administrative_division.capital', 'France'),
]


def rome_case(book):
    q = make_question('c1', 'which airport to fly into rome', ROME_KG, ['Rome'],
                      answers=[CIAMPINO[2], FIUMICINO[2]], path=[CIAMPINO, FIUMICINO])
    plans = [
        "rome's nearby airport is [ENT1]",
        'the airport near rome is [ENT1].',
        'rome is served by a nearby airport, [ENT1].',
        '[ENT1] is a nearby airport for rome.',
    ]
    book.plans(q.question, [f'("{p}",), Breadth' for p in plans])
    for p in plans:
        book.grounding([p], [('rome', NEARBY, '[ENT1]')])
    book.answer(q, [CIAMPINO, FIUMICINO],
                'Ciampino - G. B. Pastine International Airport and Leonardo da Vinci – Fiumicino Airport.')
    book.answer(q, [FIUMICINO], 'Leonardo da Vinci – Fiumicino Airport')
    return q


def texarkana_case(book):
    q = make_question('c2', 'what county is texarkana arkansas in', TEXARKANA_KG, ['Texarkana, Arkansas', 'Arkansas'],
                      answers=['Miller County'], path=[TEXARKANA_KG[1]])
    plans = {
        'Texarkana, Arkansas is contained by [ENT1].': ('texarkana arkansas', 'location.location.containedby', '[ENT1]'),
        'Texarkana, Arkansas is located in the county [ENT1].': ('texarkana arkansas', 'location.hud_county_place.county', '[ENT1]'),
        'Arkansas is part of the country [ENT1].': ('arkansas', 'location.administrative_division.country', '[ENT1]'),
        'The county of Texarkana, Arkansas is [ENT1].': ('texarkana arkansas', 'location.hud_county_place.county', '[ENT1]'),
    }
    book.plans(q.question, [f'("{p}",), Precision' for p in plans])
    for p, triple in plans.items():
        book.grounding([p], [triple])
    book.answer(q, TEXARKANA_KG, 'Miller County')
    return q


def bessie_case(book):
    q = make_question('c3', 'what type of music did bessie smith sing', BESSIE_KG, ['Bessie Smith'],
                      answers=['Jazz'], path=[BESSIE_KG[0]])
    assertion = 'Bessie Smith plays the music genre [ENT1].'
    book.plans(q.question, [f'("{assertion}",), Precision'])
    book.grounding([assertion], [('bessie smith', 'music.artist.genre', '[ENT1]')])
    book.answer(q, [BESSIE_KG[0]], 'Jazz')
    return q


def badgers_case(book):
    q = make_question(
        'c4',
        "What educational institution with men's sports team named Wisconsin Badgers did Russell Wilson go to?",
        BADGERS_KG, ['Wisconsin Badgers', 'Russell Wilson'],
        answers=['University of Wisconsin-Madison'], path=BADGERS_KG[:2],
    )
    league = ('Wisconsin Badgers', 'sports.sports_league.teams', '[ENT1]')
    school = ('Wisconsin Badgers', 'sports.school_sports_team.team', '[ENT1]')
    institution = ('Russell Wilson', 'education.education.institution', '[ENT1]')
    student = ('[ENT1]', 'education.education.student', 'Russell Wilson')
    plans = [
        (('Wisconsin Badgers is a school sports team of [ENT1].', "Russell Wilson's educational institution is [ENT1]."), [league, institution]),
        (('The school sports team known as the Wisconsin Badgers belongs to [ENT1].', 'The educational institution that Russell Wilson attended is [ENT1].'), [school, institution]),
        (('[ENT1] has a sports team called the Wisconsin Badgers.', 'Russell Wilson was a student at [ENT1].'), [league, student]),
        (('The Wisconsin Badgers play for [ENT1].', 'Russell Wilson went to [ENT1].'), [school, institution]),
    ]
    book.plans(q.question, [f'("{a}", "{b}"), Precision' for (a, b), _ in plans])
    for assertions, triples in plans:
        book.grounding(assertions, triples)
    book.answer(q, BADGERS_KG, 'University of Wisconsin-Madison')
    return q


def forrest_case(book):
    q = make_question('c5', "Who played Jenny's father in Forrest Gump?", FORREST_KG, ['Forrest Gump', "Jenny's Father"],
                      answers=['Michael Connor Humphreys'], path=FORREST_KG[2:])
    character = [("Jenny's Father", 'film.performance.character', '[ENT1]'), ('[ENT2]', 'film.performance.actor', '[ENT1]')]
    portrayed = [
        ("Jenny's Father", 'film.film_character.portrayed_in_films', '[ENT1]'),
        ('[ENT2]', 'film.film_character.portrayed_in_films', '[ENT1]'),
        ('[ENT2]', 'film.performance.actor', '[ENT3]'),
    ]
    plans = [
        (("Jenny's father is a movie character in [ENT1].", '[ENT2] performs a role in the production [ENT1].'), character),
        (("Jenny's father is a character in [ENT1].", '[ENT2] appears as an actor in [ENT1].'), character),
        (("Jenny's father is a character in movie [ENT1].", '[ENT2] is a character in [ENT1].', '[ENT3] portrayed [ENT2] in the film.'), portrayed),
    ]
    book.plans(q.question, ['(' + ', '.join(f'"{a}"' for a in assertions) + '), Precision' for assertions, _ in plans])
    for assertions, triples in plans:
        book.grounding(assertions, triples)
    book.answer(q, FORREST_KG, 'Michael Connor Humphreys')
    return q


def corfu_case(book):
    q = make_question('c6', 'People from the country that contains Corfu speak what language?', CORFU_KG, ['Corfu'],
                      answers=['Albanian language', 'Greek Language'], path=CORFU_KG[:3])
    official = ('[ENT1]', 'location.country.official_language', '[ENT2]')
    plans = [
        (("Corfu's official language is [ENT1].",), 'Breadth', [('Corfu', 'location.country.official_language', '[ENT1]')]),
        (('Corfu is belong to [ENT1].', "[ENT1]'s official language is [ENT2]."), 'Precision',
         [('Corfu', 'location.location.containedby', '[ENT1]'), official]),
        (('Corfu is an administrative division of [ENT1].', "[ENT1]'s official language is [ENT2]."), 'Breadth',
         [('Corfu', 'location.administrative_division.country', '[ENT1]'), official]),
    ]
    book.plans(q.question, [
        '(' + ', '.join(f'"{a}"' for a in assertions) + (',' if len(assertions) == 1 else '') + f'), {strategy}'
        for assertions, strategy, _ in plans
    ])
    for assertions, _, triples in plans:
        book.grounding(assertions, triples)
    book.answer(q, CORFU_KG, 'Albanian language and Greek Language')
    return q


def brussels_case(book):
    q = make_question('c7', 'What European Union country is home to the capital city of Brussels?', BRUSSELS_KG,
                      ['Brussels', 'European Union'], answers=['Belgium'], path=BRUSSELS_KG[:2])
    capital = ('Brussels', 'location.administrative_division.capital', '[ENT1]')
    in_union = ('[ENT1]', 'location.location.containedby', 'European Union')
    plans = [
        (("[ENT1]'s capital city is Brussels", 'European Union contains [ENT1].'), [capital, in_union]),
        (('The capital cities of [ENT1] are Brussels.', 'The European Union is composed of [ENT1].'),
         [('Brussels', 'location.location.containedby', '[ENT1]'), in_union]),
        (('Brussels serves as the capital city for [ENT1].', 'The member states of the European Union are [ENT1].'),
         [capital, ('[ENT1]', 'organization.membership_organization.members', 'European Union')]),
        (('Brussels is the capital city of [ENT1]', 'European Union contains [ENT1].'), [capital, in_union]),
    ]
    book.plans(q.question, [f'("{a}", "{b}"), Precision' for (a, b), _ in plans])
    for assertions, triples in plans:
        book.grounding(assertions, triples)
    book.answer(q, BRUSSELS_KG, 'Belgium')
    return q


CASES = {
    'c1': rome_case,
    'c2': texarkana_case,
    'c3': bessie_case,
    'c4': badgers_case,
    'c5': forrest_case,
    'c6': corfu_case,
    'c7': brussels_case,
}


def evidence_labels(result):
    return {(t['head'], t['relation'], t['tail']) for t in result.evidence['triples']}


@override_settings(LOGGING=QUIET_LOGGING)
class PipelineCaseTests(SimpleTestCase):

    def _run(self, case, **overrides):
        book = CaseBook()
        q = CASES[case](book)
        cfg = load_run_config(None, {'use_guidance': False, 'jobs': 1, **overrides})
        outcome = StemPipeline(cfg, book.clients(), WordEncoder(), None).run([q])
        result = outcome.results[0]
        self.assertFalse(result.failed, result.error)
        return q, result

    def _assert_answered(self, q, result):
        answers = result.answer['answers']
        self.assertEqual(hit_at_1(answers, q.answers), 1)
        self.assertEqual(answer_f1(answers, q.answers), 1.0)

    # ===========================
    # BREADTH
    # ===========================

    def test_rome_airports(self):
        q, result = self._run('c1')
        self.assertEqual(evidence_labels(result), {CIAMPINO, FIUMICINO})
        self.assertEqual(result.evidence['strategy'], 'Breadth')
        self.assertEqual(len(result.plans['plans']), 4)
        self._assert_answered(q, result)

    def test_rome_airports_forced_precision(self):
        q, result = self._run('c1', strategy_mode='precision')
        self.assertEqual(evidence_labels(result), {FIUMICINO})
        self.assertEqual({p['effective_strategy'] for p in result.plans['plans']}, {'Precision'})
        self.assertAlmostEqual(answer_f1(result.answer['answers'], q.answers), 2 / 3)

    def test_corfu_languages(self):
        q, result = self._run('c6', bias={'threshold': 0.3})
        self.assertEqual(evidence_labels(result), set(CORFU_KG))
        self.assertEqual(result.answer['answers'], ['Albanian language', 'Greek Language'])
        self._assert_answered(q, result)

    # ===========================
    # PRECISION
    # ===========================

    def test_texarkana_county(self):
        q, result = self._run('c2')
        self.assertEqual(evidence_labels(result), set(TEXARKANA_KG))
        by_tail = {t['tail']: t for t in result.evidence['triples']}
        self.assertEqual(by_tail['Miller County']['plan_idx'], 1)
        self.assertEqual(by_tail['Miller County']['anchor'], 'Texarkana, Arkansas')
        self._assert_answered(q, result)

    def test_bessie_smith_genre(self):
        q, result = self._run('c3')
        self.assertEqual(evidence_labels(result), {BESSIE_KG[0]})
        self._assert_answered(q, result)

    def test_badgers_school(self):
        q, result = self._run('c4')
        self.assertEqual(evidence_labels(result), set(BADGERS_KG))
        self.assertEqual(result.plans['plans'][0]['schema'], [
            ['Wisconsin Badgers', 'sports.sports_league.teams', '[ENT1]'],
            ['Russell Wilson', 'education.education.institution', '[ENT1]'],
        ])
        self._assert_answered(q, result)

    def test_forrest_gump_actor(self):
        q, result = self._run('c5')
        self.assertEqual(evidence_labels(result), set(FORREST_KG))
        self._assert_answered(q, result)

    def test_brussels_country(self):
        q, result = self._run('c7')
        self.assertEqual(evidence_labels(result), set(BRUSSELS_KG))
        self._assert_answered(q, result)

    # ===========================
    # RUNS
    # ===========================

    def test_all_cases_in_parallel(self):
        book = CaseBook()
        questions = [build(book) for build in CASES.values()]
        missing = make_question('c8', 'an unrecorded question', ROME_KG, ['Rome'])
        cfg = load_run_config(None, {'use_guidance': False})
        outcome = StemPipeline(cfg, book.clients(), WordEncoder(), None).run(questions[:5] + [missing], jobs=4)

        self.assertEqual([r.question_id for r in outcome.results], ['c1', 'c2', 'c3', 'c4', 'c5', 'c8'])
        self.assertEqual([r.question_id for r in outcome.failures], ['c8'])
        self.assertIn('FixtureMissingError', outcome.failures[0].error)

        with tempfile.TemporaryDirectory() as tmp:
            write_run_outputs(outcome, tmp)
            answers = [json.loads(line) for line in (Path(tmp) / 'answers.jsonl').read_text(encoding='utf-8').splitlines()]
            failures = (Path(tmp) / 'failures.jsonl').read_text(encoding='utf-8').splitlines()
        self.assertEqual([a['question_id'] for a in answers], ['c1', 'c2', 'c3', 'c4', 'c5'])
        self.assertEqual(len(failures), 1)

    def test_trace_records_searches(self):
        q, result = self._run('c3', trace=True)
        searches = result.trace['searches']
        self.assertEqual(len(searches), 1)
        self.assertEqual(len(searches[0]['steps'][0]['candidates']), 3)
