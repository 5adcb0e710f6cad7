import pandas as pd


def error_warning(text: str) -> str:
    """
    Formats an error message based on a warning template

    Parameters
    -----------
    text (str): The error message

    Returns
    -----------
    (str): The formatted message
    """

    return f'⚠️ {text}'


def error_fatal(text: str) -> str:
    """
    Formats an error message based on a fatal template

    Parameters
    -----------
    text (str): The error message

    Returns
    -----------
    (str): The formatted message
    """

    return f'❌ {text}'


def success(text: str) -> str:
    """
    Formats a message using a template signifying success

    Parameters
    -----------
    text (str): The message

    Returns
    -----------
    (str): The formatted message
    """

    return f'✅ {text}'


def key_values(title: str, values: dict) -> str:
    """Aligned `key: value` block under a title"""

    width = max((len(str(key)) for key in values), default=0)
    lines = [title, *(f'  {str(key):<{width}}  {_format(value)}' for key, value in values.items())]
    return '\n'.join(lines)


def table(title: str, frame: pd.DataFrame) -> str:
    return f'{title}\n{frame.to_string(index=False, float_format=lambda value: f"{value:.4f}")}'


def _format(value) -> str:
    if isinstance(value, float):
        return f'{value:.4f}'
    return str(value)
