from cyclewalk.cli import main

main()
