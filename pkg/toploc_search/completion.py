"""Shell completion for the toploc-search command group.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

import click
from click.shell_completion import BashComplete, FishComplete, ShellComplete, ZshComplete

PROG_NAME = "toploc-search"
COMPLETE_VAR = "_TOPLOC_SEARCH_COMPLETE"
COMPLETERS: dict[str, type[ShellComplete]] = {
    "bash": BashComplete,
    "zsh": ZshComplete,
    "fish": FishComplete,
}


@click.command(name="completion")
@click.argument("shell", type=click.Choice(sorted(COMPLETERS), case_sensitive=False))
def completion_command(shell: str) -> None:
    """Print the completion script for SHELL (bash, zsh or fish).

    \b
    Examples:
        eval "$(toploc-search completion bash)"      # ~/.bashrc
        eval "$(toploc-search completion zsh)"       # ~/.zshrc
        toploc-search completion fish > ~/.config/fish/completions/toploc-search.fish

    Subcommands, option names and the choices of --mode, --param and
    INDEX_KIND complete; file paths fall back to the shell's own completion.
    """
    root = click.get_current_context().find_root().command
    completer = COMPLETERS[shell.lower()](
        cli=root, ctx_args={}, prog_name=PROG_NAME, complete_var=COMPLETE_VAR
    )
    click.echo(completer.source())
