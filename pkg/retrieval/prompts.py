import logging

from django.template import engines

logger = logging.getLogger(__name__)

PROMPT_NAMES = ('decompose', 'ground', 'generate', 'path_assertions', 'strategy', 'reverse')


def render_prompt(name, examples=(), **context):
    """Render one of the shipped prompt assets; autoescape is off for this engine."""
    template = engines['prompts'].get_template(f"{name}.txt")
    return template.render({'examples': list(examples), **context})


def format_triple_list(triples):
    """Render triples the way the prompts show them: [("h", "r", "t"), ...]."""
    return '[' + ', '.join(f'("{h}", "{r}", "{t}")' for h, r, t in triples) + ']'


def format_assertions(assertions):
    return '(' + ', '.join(f'"{text}"' for text in assertions) + (',)' if len(assertions) == 1 else ')')
