def fragalign():
    from main import cli

    cli()

