from losa.cli import main

main()
